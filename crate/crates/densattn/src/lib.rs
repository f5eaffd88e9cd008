//! Parameter-free attention inside a crowd-density-estimation pipeline.
//!
//! The crate bundles everything needed to study attention mechanisms in a
//! counting network on a single desk-scale machine:
//!
//! - [`tensor`]: a small double-precision N×C×H×W tensor core with
//!   reverse-mode gradients and finite-difference verification.
//! - [`attention`]: the parameter-free mechanisms (PFCA, SA, SimAM,
//!   PFCASA) and the parameterized baselines (SE, CBAM, CAM) behind one
//!   config type, plus the 1% parameter-budget auditor.
//! - [`density`]: point annotations to ground-truth density maps via
//!   geometry-adaptive or fixed Gaussian kernels, with sum-preserving
//!   downsampling.
//! - [`model`]: a CSRNet-shaped builder (VGG-style frontend, attention
//!   slot, dilated backend) at configurable channel widths.
//! - [`train`]: Euclidean loss, SGD with momentum and weight decay, the
//!   patch augmentation pipeline, and the training loop.
//! - [`eval`]: counting metrics and density-binned accuracy analysis.
//! - [`synth`]: a synthetic blob dataset generator so experiments run
//!   without external data.
//!
//! See the `examples/` directory for a runnable tour of each capability;
//! the `densattn` binary wires the same APIs into reproducible
//! experiments.

pub mod attention;
pub mod error;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};

/// Cap rayon worker parallelism from the `DENSATTN_THREADS` environment
/// variable. Call once at process start; later calls are ignored.
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("DENSATTN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
