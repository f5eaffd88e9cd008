//! Attention mechanisms for the slot between the counting model's
//! frontend and its dilated backend.
//!
//! Four mechanisms are parameter-free closed forms over feature
//! statistics (PFCA, SA, SimAM, and their combination PFCASA); three are
//! parameterized baselines (SE, CBAM, CAM) kept under a 1% parameter
//! budget by the auditor at the bottom of the module.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spatial_softmax, Axes, ParamStore, Shape, Tensor};

/// Spatial-attention activation. Softmax is the original formulation;
/// sigmoid is the variant that actually trains (softmax squashes every
/// position by ~1/(H·W), starving the backend).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaActivation {
    Softmax,
    Sigmoid,
}

impl Default for SaActivation {
    fn default() -> Self {
        SaActivation::Sigmoid
    }
}

fn default_lambda() -> f64 {
    1e-4
}

/// Which attention mechanism sits in the model's slot, with its
/// hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttentionConfig {
    None,
    Pfca {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Sa {
        #[serde(default)]
        activation: SaActivation,
    },
    Pfcasa {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        activation: SaActivation,
    },
    Simam {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Se {
        r: usize,
    },
    Cbam {
        r: usize,
    },
    Cam {
        r: usize,
    },
}

impl AttentionConfig {
    pub fn pfca() -> Self {
        AttentionConfig::Pfca { lambda: default_lambda() }
    }

    pub fn sa(activation: SaActivation) -> Self {
        AttentionConfig::Sa { activation }
    }

    pub fn pfcasa(activation: SaActivation) -> Self {
        AttentionConfig::Pfcasa { lambda: default_lambda(), activation }
    }

    pub fn simam() -> Self {
        AttentionConfig::Simam { lambda: default_lambda() }
    }

    /// True for mechanisms that add no learnable parameters.
    pub fn is_parameter_free(&self) -> bool {
        !matches!(self, AttentionConfig::Se { .. } | AttentionConfig::Cbam { .. } | AttentionConfig::Cam { .. })
    }

    /// Validate hyperparameters, and divisibility when the insertion
    /// channel count is known.
    pub fn validate(&self, channels: Option<usize>) -> Result<()> {
        match *self {
            AttentionConfig::Pfca { lambda }
            | AttentionConfig::Simam { lambda }
            | AttentionConfig::Pfcasa { lambda, .. } => {
                if lambda <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "{self}: lambda must be positive, got {lambda}"
                    )));
                }
            }
            AttentionConfig::Se { r } | AttentionConfig::Cbam { r } | AttentionConfig::Cam { r } => {
                if r == 0 {
                    return Err(Error::InvalidConfig(format!("{self}: reduction ratio must be >= 1")));
                }
                if let Some(c) = channels {
                    if c % r != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{self}: reduction ratio {r} does not divide {c} channels"
                        )));
                    }
                }
            }
            AttentionConfig::None | AttentionConfig::Sa { .. } => {}
        }
        Ok(())
    }
}

impl std::fmt::Display for AttentionConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionConfig::None => write!(f, "none"),
            AttentionConfig::Pfca { .. } => write!(f, "PFCA"),
            AttentionConfig::Sa { activation: SaActivation::Sigmoid } => write!(f, "SA"),
            AttentionConfig::Sa { activation: SaActivation::Softmax } => write!(f, "SA(softmax)"),
            AttentionConfig::Pfcasa { activation: SaActivation::Sigmoid, .. } => write!(f, "PFCASA"),
            AttentionConfig::Pfcasa { activation: SaActivation::Softmax, .. } => write!(f, "PFCASA(softmax)"),
            AttentionConfig::Simam { .. } => write!(f, "SimAM"),
            AttentionConfig::Se { r } => write!(f, "SE(r={r})"),
            AttentionConfig::Cbam { r } => write!(f, "CBAM(r={r})"),
            AttentionConfig::Cam { r } => write!(f, "CAM(r={r})"),
        }
    }
}

fn check_lambda(op: &'static str, lambda: f64) -> Result<()> {
    if lambda <= 0.0 {
        return Err(Error::invalid(op, format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Parameter-free channel attention. Per sample: U = GAP(x); with mu and
/// var the channel-dimension moments of U,
/// V_j = ((U_j - mu)^2 + 2(var + lambda)) / (4(var + lambda)),
/// and the output is x * sigmoid(V) broadcast over space.
pub fn pfca(x: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda("pfca", lambda)?;
    let u = x.global_avg_pool()?;
    let (mu, var) = u.moments(Axes::channel())?;
    let dev = u.sub(&mu)?.square()?;
    let stabilized = var.affine(1.0, lambda);
    let v = dev.add(&stabilized.affine(2.0, 0.0))?.div(&stabilized.affine(4.0, 0.0))?;
    x.mul(&v.sigmoid())
}

/// Parameter-free spatial attention. s(i,j) sums channels at each
/// position; the weight map is softmax over all H·W positions per sample
/// (weights sum to 1) or an elementwise sigmoid, and the output is
/// x * p broadcast over channels.
pub fn sa(x: &Tensor, activation: SaActivation) -> Result<Tensor> {
    let s = x.channel_sum()?;
    let p = match activation {
        SaActivation::Softmax => spatial_softmax(&s)?,
        SaActivation::Sigmoid => s.sigmoid(),
    };
    x.mul(&p)
}

/// Parameter-free 3-D attention. Per channel with spatial moments
/// (mean, var) over the M = H·W activations, the minimal energy is
/// e_t = 4(var + lambda) / ((t - mean)^2 + 2 var + 2 lambda); attention
/// is inversely proportional to it, so the output is
/// x * sigmoid(1 / e_t) elementwise.
pub fn simam(x: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda("simam", lambda)?;
    let (mu, var) = x.moments(Axes::spatial())?;
    let dev = x.sub(&mu)?.square()?;
    let stabilized = var.affine(1.0, lambda);
    let inv_e = dev.add(&stabilized.affine(2.0, 0.0))?.div(&stabilized.affine(4.0, 0.0))?;
    x.mul(&inv_e.sigmoid())
}

/// Channel-then-spatial composition: pfcasa(x) = sa(pfca(x)). Both stages
/// already include their final multiplication, so this reproduces the
/// standalone operations exactly.
pub fn pfcasa(x: &Tensor, lambda: f64, activation: SaActivation) -> Result<Tensor> {
    sa(&pfca(x, lambda)?, activation)
}

fn gaussian_tensor(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    let data: Vec<f64> = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape, data, false, None)
}

fn check_channels(op: &'static str, built_for: usize, x: &Tensor) -> Result<()> {
    if x.shape().c != built_for {
        return Err(Error::shape(
            op,
            format!("module built for {} channels, input has {} (dim C)", built_for, x.shape().c),
        ));
    }
    Ok(())
}

/// Squeeze-and-excitation: GAP, a two-layer bottleneck (C -> C/r -> C,
/// bias-free 1x1 convs), sigmoid gate per channel. 2*C^2/r parameters.
pub struct SeModule {
    w1: Tensor,
    w2: Tensor,
    channels: usize,
}

impl SeModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        r: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<SeModule> {
        AttentionConfig::Se { r }.validate(Some(channels))?;
        let mid = channels / r;
        let w1 = store.register(
            &format!("{prefix}.fc1.weight"),
            gaussian_tensor(Shape::new(mid, channels, 1, 1), init_std, rng),
        )?;
        let w2 = store.register(
            &format!("{prefix}.fc2.weight"),
            gaussian_tensor(Shape::new(channels, mid, 1, 1), init_std, rng),
        )?;
        Ok(SeModule { w1, w2, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels("se", self.channels, x)?;
        let s = x
            .global_avg_pool()?
            .conv2d(&self.w1, None, 1, 0, 1)?
            .relu()
            .conv2d(&self.w2, None, 1, 0, 1)?
            .sigmoid();
        x.mul(&s)
    }
}

/// CBAM: SE-style channel stage over both average- and max-pooled
/// descriptors through a shared bottleneck, then a spatial stage gating
/// with a single bias-free 7x7 convolution over the channel-avg and
/// channel-max maps. Exactly 98 parameters more than SE at equal r.
pub struct CbamModule {
    w1: Tensor,
    w2: Tensor,
    spatial: Tensor,
    channels: usize,
}

impl CbamModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        r: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<CbamModule> {
        AttentionConfig::Cbam { r }.validate(Some(channels))?;
        let mid = channels / r;
        let w1 = store.register(
            &format!("{prefix}.mlp1.weight"),
            gaussian_tensor(Shape::new(mid, channels, 1, 1), init_std, rng),
        )?;
        let w2 = store.register(
            &format!("{prefix}.mlp2.weight"),
            gaussian_tensor(Shape::new(channels, mid, 1, 1), init_std, rng),
        )?;
        let spatial = store.register(
            &format!("{prefix}.spatial.weight"),
            gaussian_tensor(Shape::new(1, 2, 7, 7), init_std, rng),
        )?;
        Ok(CbamModule { w1, w2, spatial, channels })
    }

    fn shared_mlp(&self, descriptor: &Tensor) -> Result<Tensor> {
        descriptor
            .conv2d(&self.w1, None, 1, 0, 1)?
            .relu()
            .conv2d(&self.w2, None, 1, 0, 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels("cbam", self.channels, x)?;
        let avg = x.global_avg_pool()?;
        let max = x.reduce_max(Axes::spatial())?;
        let gate = self.shared_mlp(&avg)?.add(&self.shared_mlp(&max)?)?.sigmoid();
        let xc = x.mul(&gate)?;

        let savg = xc.reduce_mean(Axes::channel())?;
        let smax = xc.reduce_max(Axes::channel())?;
        let stacked = Tensor::concat_channels(&[&savg, &smax])?;
        let ms = stacked.conv2d(&self.spatial, None, 1, 3, 1)?.sigmoid();
        xc.mul(&ms)
    }
}

/// Coordinate attention: directional average pooling along H and W, a
/// shared 1x1 bottleneck (with bias, no normalization layer), and two
/// 1x1 expansion convs producing the H- and W-direction gates.
pub struct CamModule {
    w1: Tensor,
    b1: Tensor,
    wh: Tensor,
    bh: Tensor,
    ww: Tensor,
    bw: Tensor,
    channels: usize,
}

impl CamModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        r: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<CamModule> {
        AttentionConfig::Cam { r }.validate(Some(channels))?;
        let mid = channels / r;
        let w1 = store.register(
            &format!("{prefix}.squeeze.weight"),
            gaussian_tensor(Shape::new(mid, channels, 1, 1), init_std, rng),
        )?;
        let b1 = store.register(&format!("{prefix}.squeeze.bias"), Tensor::zeros(Shape::new(1, mid, 1, 1)))?;
        let wh = store.register(
            &format!("{prefix}.expand_h.weight"),
            gaussian_tensor(Shape::new(channels, mid, 1, 1), init_std, rng),
        )?;
        let bh = store.register(&format!("{prefix}.expand_h.bias"), Tensor::zeros(Shape::new(1, channels, 1, 1)))?;
        let ww = store.register(
            &format!("{prefix}.expand_w.weight"),
            gaussian_tensor(Shape::new(channels, mid, 1, 1), init_std, rng),
        )?;
        let bw = store.register(&format!("{prefix}.expand_w.bias"), Tensor::zeros(Shape::new(1, channels, 1, 1)))?;
        Ok(CamModule { w1, b1, wh, bh, ww, bw, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels("cam", self.channels, x)?;
        // Pool along W keeps an N,C,H,1 profile; along H an N,C,1,W one.
        // The 1x1 bottleneck is pointwise, so applying it to the two
        // profiles separately equals applying it to their concatenation.
        let zh = x.reduce_mean(Axes::width())?;
        let zw = x.reduce_mean(Axes::height())?;
        let fh = zh.conv2d(&self.w1, Some(&self.b1), 1, 0, 1)?.relu();
        let fw = zw.conv2d(&self.w1, Some(&self.b1), 1, 0, 1)?.relu();
        let ah = fh.conv2d(&self.wh, Some(&self.bh), 1, 0, 1)?.sigmoid();
        let aw = fw.conv2d(&self.ww, Some(&self.bw), 1, 0, 1)?.sigmoid();
        x.mul(&ah)?.mul(&aw)
    }
}

/// A constructed attention slot: parameter-free kinds are pure functions,
/// parameterized kinds own their registered parameters.
pub enum AttentionLayer {
    None,
    Pfca { lambda: f64 },
    Sa { activation: SaActivation },
    Pfcasa { lambda: f64, activation: SaActivation },
    Simam { lambda: f64 },
    Se(SeModule),
    Cbam(CbamModule),
    Cam(CamModule),
}

impl AttentionLayer {
    /// Build the slot for `channels` input channels. Parameterized kinds
    /// register their tensors in `store` under the `attention.` prefix;
    /// parameter-free kinds register nothing.
    pub fn build(
        cfg: &AttentionConfig,
        channels: usize,
        store: &mut ParamStore,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<AttentionLayer> {
        cfg.validate(Some(channels))?;
        Ok(match *cfg {
            AttentionConfig::None => AttentionLayer::None,
            AttentionConfig::Pfca { lambda } => AttentionLayer::Pfca { lambda },
            AttentionConfig::Sa { activation } => AttentionLayer::Sa { activation },
            AttentionConfig::Pfcasa { lambda, activation } => AttentionLayer::Pfcasa { lambda, activation },
            AttentionConfig::Simam { lambda } => AttentionLayer::Simam { lambda },
            AttentionConfig::Se { r } => {
                AttentionLayer::Se(SeModule::new(store, "attention", channels, r, init_std, rng)?)
            }
            AttentionConfig::Cbam { r } => {
                AttentionLayer::Cbam(CbamModule::new(store, "attention", channels, r, init_std, rng)?)
            }
            AttentionConfig::Cam { r } => {
                AttentionLayer::Cam(CamModule::new(store, "attention", channels, r, init_std, rng)?)
            }
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AttentionLayer::None => Ok(x.clone()),
            AttentionLayer::Pfca { lambda } => pfca(x, *lambda),
            AttentionLayer::Sa { activation } => sa(x, *activation),
            AttentionLayer::Pfcasa { lambda, activation } => pfcasa(x, *lambda, *activation),
            AttentionLayer::Simam { lambda } => simam(x, *lambda),
            AttentionLayer::Se(m) => m.forward(x),
            AttentionLayer::Cbam(m) => m.forward(x),
            AttentionLayer::Cam(m) => m.forward(x),
        }
    }
}

/// Exact learnable-parameter count of the attention module instance for
/// `channels` input channels.
pub fn param_count(cfg: &AttentionConfig, channels: usize) -> Result<u64> {
    if channels == 0 {
        return Err(Error::invalid("param_count", "channels must be >= 1"));
    }
    cfg.validate(Some(channels))?;
    let c = channels as u64;
    Ok(match *cfg {
        AttentionConfig::None
        | AttentionConfig::Pfca { .. }
        | AttentionConfig::Sa { .. }
        | AttentionConfig::Pfcasa { .. }
        | AttentionConfig::Simam { .. } => 0,
        AttentionConfig::Se { r } => 2 * c * (c / r as u64),
        AttentionConfig::Cbam { r } => 2 * c * (c / r as u64) + 98,
        AttentionConfig::Cam { r } => {
            let mid = c / r as u64;
            // squeeze conv (with bias) + two expansion convs (with bias)
            c * mid + mid + 2 * (mid * c + c)
        }
    })
}

/// Outcome of auditing an attention config against the 1% added-parameter
/// ceiling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub config: String,
    pub base_params: u64,
    pub added_params: u64,
    pub ratio: f64,
    pub within_budget: bool,
}

/// Audit `cfg` at `channels` insertion channels against a base model of
/// `base` parameters: within budget iff added/base <= 0.01.
pub fn budget_audit(base: u64, cfg: &AttentionConfig, channels: usize) -> Result<BudgetReport> {
    if base == 0 {
        return Err(Error::invalid("budget_audit", "base parameter count must be positive"));
    }
    let added = param_count(cfg, channels)?;
    let ratio = added as f64 / base as f64;
    Ok(BudgetReport {
        config: cfg.to_string(),
        base_params: base,
        added_params: added,
        ratio,
        within_budget: ratio <= 0.01,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SIGMOID_HALF: f64 = 0.622_459_331_201_854_6;

    fn random_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pfca_degenerate_variance_scales_by_sigmoid_half() {
        // every channel has the same mean -> V = 0.5 everywhere
        let x = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, _, h, w| {
            // channel means all equal 1.0, but spatial patterns differ
            1.0 + (h as f64 - 0.5) * (w as f64 - 0.5) * 0.0
        });
        let y = pfca(&x, 1e-4).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data().iter()) {
            assert!((yv - xv * SIGMOID_HALF).abs() < 1e-12);
        }
    }

    #[test]
    fn pfca_two_constant_channels_hand_value() {
        // U = [0, 2] -> V = (1 + 2.0002)/4.0004 = 0.7499750...
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, _, _| 2.0 * c as f64);
        let y = pfca(&x, 1e-4).unwrap();
        let v: f64 = (1.0 + 2.0 * (1.0 + 1e-4)) / (4.0 * (1.0 + 1e-4));
        assert!((v - 0.749975).abs() < 1e-6);
        let scale = 1.0 / (1.0 + (-v).exp());
        for w in 0..4 {
            assert!((y.at(0, 1, w / 2, w % 2) - 2.0 * scale).abs() < 1e-12);
        }
        assert!(y.at(0, 0, 0, 0).abs() < 1e-15);
    }

    #[test]
    fn pfca_matches_scalar_reference_per_channel() {
        let x = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| c as f64);
        let y = pfca(&x, 1e-4).unwrap();
        let expect = oracle::pfca_reference(&x.to_vec(), x.shape().dims(), 1e-4);
        assert!(oracle::max_abs_diff(&y.data(), &expect) < 1e-12);

        let x = random_tensor(Shape::new(2, 8, 6, 6), 42);
        let y = pfca(&x, 1e-4).unwrap();
        let expect = oracle::pfca_reference(&x.to_vec(), x.shape().dims(), 1e-4);
        assert!(oracle::max_abs_diff(&y.data(), &expect) < 1e-12);
    }

    #[test]
    fn sa_softmax_on_constant_input_divides_by_positions() {
        let x = Tensor::full(Shape::new(1, 3, 4, 4), 2.0);
        let y = sa(&x, SaActivation::Softmax).unwrap();
        for v in y.data().iter() {
            assert!((v - 2.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sa_sigmoid_on_zero_input_is_zero() {
        let x = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let y = sa(&x, SaActivation::Sigmoid).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sa_matches_scalar_reference_and_mass_is_one() {
        let x = random_tensor(Shape::new(1, 3, 4, 4), 7);
        for (variant, softmax) in [(SaActivation::Softmax, true), (SaActivation::Sigmoid, false)] {
            let y = sa(&x, variant).unwrap();
            let expect = oracle::sa_reference(&x.to_vec(), x.shape().dims(), softmax);
            assert!(oracle::max_abs_diff(&y.data(), &expect) < 1e-12);
        }
        let p = spatial_softmax(&x.channel_sum().unwrap()).unwrap();
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simam_constant_channel_scales_by_sigmoid_half() {
        let x = Tensor::full(Shape::new(1, 2, 3, 3), 1.7);
        let y = simam(&x, 1e-4).unwrap();
        for v in y.data().iter() {
            assert!((v - 1.7 * SIGMOID_HALF).abs() < 1e-12);
        }
    }

    #[test]
    fn simam_matches_scalar_reference() {
        // channel [0, 0, 0, 4]: mean 1, population var 3
        let x = Tensor::from_data(Shape::new(1, 1, 2, 2), vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        let y = simam(&x, 1e-4).unwrap();
        let expect = oracle::simam_reference(&x.to_vec(), x.shape().dims(), 1e-4);
        assert!(oracle::max_abs_diff(&y.data(), &expect) < 1e-12);

        let x = random_tensor(Shape::new(2, 8, 6, 6), 13);
        let y = simam(&x, 1e-4).unwrap();
        let expect = oracle::simam_reference(&x.to_vec(), x.shape().dims(), 1e-4);
        assert!(oracle::max_abs_diff(&y.data(), &expect) < 1e-12);
    }

    #[test]
    fn simam_farthest_neuron_gets_largest_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            // positive inputs so weights can be recovered as y/x
            let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, _, _| rng.gen_range(0.5..2.5));
            let y = simam(&x, 1e-4).unwrap();
            let xd = x.to_vec();
            let mean = xd.iter().sum::<f64>() / xd.len() as f64;
            let weights: Vec<f64> = y.data().iter().zip(&xd).map(|(yv, xv)| yv / xv).collect();
            let farthest = (0..xd.len())
                .max_by(|&a, &b| {
                    ((xd[a] - mean).abs()).partial_cmp(&(xd[b] - mean).abs()).unwrap()
                })
                .unwrap();
            let max_weight = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((weights[farthest] - max_weight).abs() < 1e-12);
        }
    }

    #[test]
    fn pfcasa_is_exactly_the_composition() {
        let x = random_tensor(Shape::new(2, 4, 5, 5), 5);
        for activation in [SaActivation::Sigmoid, SaActivation::Softmax] {
            let composed = pfcasa(&x, 1e-4, activation).unwrap();
            let manual = sa(&pfca(&x, 1e-4).unwrap(), activation).unwrap();
            assert!(oracle::max_abs_diff(&composed.data(), &manual.data()) < 1e-12);
        }
    }

    #[test]
    fn pfcasa_zero_input_is_zero() {
        let x = Tensor::zeros(Shape::new(1, 4, 3, 3));
        let y = pfcasa(&x, 1e-4, SaActivation::Sigmoid).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pfcasa_constant_input_hand_composition() {
        let (c, value) = (4usize, 0.8f64);
        let x = Tensor::full(Shape::new(1, c, 2, 2), value);
        let y = pfcasa(&x, 1e-4, SaActivation::Sigmoid).unwrap();
        let xc = value * SIGMOID_HALF;
        let p = 1.0 / (1.0 + (-(c as f64 * xc)).exp());
        for v in y.data().iter() {
            assert!((v - xc * p).abs() < 1e-12);
        }
    }

    #[test]
    fn se_with_zero_weights_halves_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = SeModule::new(&mut store, "attention", 4, 2, 0.01, &mut rng).unwrap();
        store.apply_update("attention.fc1.weight", &vec![0.0; 4 * 2]).unwrap();
        store.apply_update("attention.fc2.weight", &vec![0.0; 4 * 2]).unwrap();
        let x = random_tensor(Shape::new(1, 4, 3, 3), 2);
        let y = se.forward(&x).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data().iter()) {
            assert!((yv - 0.5 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn module_rejects_wrong_channel_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = SeModule::new(&mut store, "attention", 8, 2, 0.01, &mut rng).unwrap();
        let x = Tensor::zeros(Shape::new(1, 4, 3, 3));
        assert!(se.forward(&x).is_err());
    }

    #[test]
    fn cbam_minus_se_is_98_for_any_c_and_r() {
        for (c, r) in [(512usize, 4usize), (512, 16), (64, 8), (32, 2), (128, 16)] {
            let se = param_count(&AttentionConfig::Se { r }, c).unwrap();
            let cbam = param_count(&AttentionConfig::Cbam { r }, c).unwrap();
            assert_eq!(cbam - se, 98, "C={c}, r={r}");
        }
    }

    #[test]
    fn parameter_free_kinds_count_zero_and_register_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cfg in [
            AttentionConfig::None,
            AttentionConfig::pfca(),
            AttentionConfig::sa(SaActivation::Sigmoid),
            AttentionConfig::sa(SaActivation::Softmax),
            AttentionConfig::pfcasa(SaActivation::Sigmoid),
            AttentionConfig::simam(),
        ] {
            for c in [1usize, 8, 64, 512] {
                assert_eq!(param_count(&cfg, c).unwrap(), 0, "{cfg} at C={c}");
            }
            let mut store = ParamStore::new();
            let before = store.len();
            let layer = AttentionLayer::build(&cfg, 16, &mut store, 0.01, &mut rng).unwrap();
            assert_eq!(store.len(), before, "{cfg} registered parameters");
            // and it still runs
            let x = random_tensor(Shape::new(1, 16, 3, 3), 4);
            layer.forward(&x).unwrap();
        }
    }

    #[test]
    fn budget_audit_table_rows() {
        let base = 16_263_041;
        let se4 = budget_audit(base, &AttentionConfig::Se { r: 4 }, 512).unwrap();
        assert_eq!(se4.added_params, 131_072);
        assert!(se4.within_budget);
        assert!(se4.ratio > 0.008 && se4.ratio < 0.0081);

        let none = budget_audit(base, &AttentionConfig::None, 512).unwrap();
        assert_eq!(none.added_params, 0);
        assert_eq!(none.ratio, 0.0);

        // r=2 exceeds the ceiling
        let se2 = budget_audit(base, &AttentionConfig::Se { r: 2 }, 512).unwrap();
        assert!(!se2.within_budget);
    }

    #[test]
    fn non_dividing_ratio_is_rejected() {
        assert!(param_count(&AttentionConfig::Se { r: 3 }, 512).is_err());
        assert!(budget_audit(1000, &AttentionConfig::Cam { r: 7 }, 64).is_err());
    }

    #[test]
    fn gradients_flow_through_all_mechanisms() {
        let x = random_tensor(Shape::new(1, 4, 3, 3), 21);
        let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> crate::Result<Tensor>>)> = vec![
            ("pfca", Box::new(|t: &Tensor| pfca(t, 1e-4)?.square()?.reduce_sum(Axes::all()))),
            ("sa-softmax", Box::new(|t: &Tensor| sa(t, SaActivation::Softmax)?.square()?.reduce_sum(Axes::all()))),
            ("sa-sigmoid", Box::new(|t: &Tensor| sa(t, SaActivation::Sigmoid)?.square()?.reduce_sum(Axes::all()))),
            ("simam", Box::new(|t: &Tensor| simam(t, 1e-4)?.square()?.reduce_sum(Axes::all()))),
            ("pfcasa", Box::new(|t: &Tensor| pfcasa(t, 1e-4, SaActivation::Sigmoid)?.square()?.reduce_sum(Axes::all()))),
        ];
        for (name, f) in cases {
            let err = grad_check(|t| f(t), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn gradients_flow_through_parameterized_modules() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_tensor(Shape::new(1, 4, 3, 3), 33);
        for cfg in [
            AttentionConfig::Se { r: 2 },
            AttentionConfig::Cbam { r: 2 },
            AttentionConfig::Cam { r: 2 },
        ] {
            let mut store = ParamStore::new();
            let layer = AttentionLayer::build(&cfg, 4, &mut store, 0.2, &mut rng).unwrap();
            let err = grad_check(
                |t| layer.forward(t)?.square()?.reduce_sum(Axes::all()),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{cfg}: input grad relative error {err}");
        }
    }

    #[test]
    fn config_serde_roundtrip_with_defaults() {
        let json = r#"{"kind":"pfca"}"#;
        let cfg: AttentionConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, AttentionConfig::Pfca { lambda: 1e-4 });

        let json = r#"{"kind":"sa","activation":"softmax"}"#;
        let cfg: AttentionConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, AttentionConfig::Sa { activation: SaActivation::Softmax });

        let json = r#"{"kind":"se","r":4}"#;
        let cfg: AttentionConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, AttentionConfig::Se { r: 4 });

        let back = serde_json::to_string(&AttentionConfig::Cbam { r: 16 }).unwrap();
        let cfg: AttentionConfig = serde_json::from_str(&back).unwrap();
        assert_eq!(cfg, AttentionConfig::Cbam { r: 16 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_preserves_shape_and_is_bounded(
            n in 1usize..3, c in 1usize..6, h in 1usize..5, w in 1usize..5, seed in 0u64..1000
        ) {
            let shape = Shape::new(n, c, h, w);
            let x = random_tensor(shape, seed);
            let max_in = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut outputs = vec![
                pfca(&x, 1e-4).unwrap(),
                sa(&x, SaActivation::Sigmoid).unwrap(),
                sa(&x, SaActivation::Softmax).unwrap(),
                simam(&x, 1e-4).unwrap(),
                pfcasa(&x, 1e-4, SaActivation::Sigmoid).unwrap(),
            ];
            if c % 2 == 0 {
                let mut store = ParamStore::new();
                let se = AttentionLayer::build(&AttentionConfig::Se { r: 2 }, c, &mut store, 0.01, &mut rng).unwrap();
                outputs.push(se.forward(&x).unwrap());
            }
            for y in outputs {
                prop_assert_eq!(y.shape(), shape);
                let max_out = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(max_out <= max_in + 1e-15);
            }
        }
    }
}
