//! Independent reference implementations used by the verification suite.
//!
//! Everything here is written as plain per-element loops over `f64`
//! slices, with no use of the tensor core, so the checks in
//! [`crate::verify`] and the test suites compare two genuinely separate
//! computation paths.

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Naive nested-loop convolution; the canonical summation order is input
/// channel, then kernel row, then kernel column.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    x: &[f64],
    x_dims: [usize; 4],
    w: &[f64],
    w_dims: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Vec<f64> {
    let [n_batch, cin, h, wd] = x_dims;
    let [cout, wcin, kh, kw] = w_dims;
    assert_eq!(cin, wcin);
    let oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n_batch * cout * oh * ow];
    let mut o = 0;
    for n in 0..n_batch {
        for co in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy * dilation) as isize - pad as isize;
                                let ix = (xo * stride + dx * dilation) as isize - pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                    let xi = ((n * cin + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((co * cin + ci) * kh + dy) * kw + dx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[o] = acc;
                    o += 1;
                }
            }
        }
    }
    out
}

/// Per-channel scalar evaluation of the channel attention rule:
/// GAP per channel, then V_j = ((U_j - mu)^2 + 2(var + lambda)) /
/// (4(var + lambda)), output = x * sigmoid(V_j).
pub fn pfca_reference(x: &[f64], dims: [usize; 4], lambda: f64) -> Vec<f64> {
    let [n_batch, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..n_batch {
        let mut u = Vec::with_capacity(c);
        for j in 0..c {
            let base = (n * c + j) * hw;
            u.push(x[base..base + hw].iter().sum::<f64>() / hw as f64);
        }
        let (mu, var) = mean_var(&u);
        for j in 0..c {
            let v = ((u[j] - mu) * (u[j] - mu) + 2.0 * (var + lambda)) / (4.0 * (var + lambda));
            let weight = sigmoid(v);
            let base = (n * c + j) * hw;
            for i in 0..hw {
                out[base + i] = x[base + i] * weight;
            }
        }
    }
    out
}

/// Per-position scalar evaluation of spatial attention: channel-summed
/// map, softmax (max-shifted) or sigmoid over positions, then reweight.
pub fn sa_reference(x: &[f64], dims: [usize; 4], softmax: bool) -> Vec<f64> {
    let [n_batch, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..n_batch {
        let mut s = vec![0.0; hw];
        for (i, slot) in s.iter_mut().enumerate() {
            for k in 0..c {
                *slot += x[(n * c + k) * hw + i];
            }
        }
        let p: Vec<f64> = if softmax {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|&v| (v - m).exp()).collect();
            let denom: f64 = e.iter().sum();
            e.iter().map(|&v| v / denom).collect()
        } else {
            s.iter().map(|&v| sigmoid(v)).collect()
        };
        for k in 0..c {
            for i in 0..hw {
                let idx = (n * c + k) * hw + i;
                out[idx] = x[idx] * p[i];
            }
        }
    }
    out
}

/// Per-neuron scalar evaluation of the minimal-energy attention rule:
/// e_t = 4(var + lambda) / ((t - mean)^2 + 2 var + 2 lambda) per neuron,
/// output = x * sigmoid(1 / e_t), with channel statistics over all
/// H*W activations.
pub fn simam_reference(x: &[f64], dims: [usize; 4], lambda: f64) -> Vec<f64> {
    let [n_batch, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..n_batch {
        for j in 0..c {
            let base = (n * c + j) * hw;
            let channel = &x[base..base + hw];
            let (mu, var) = mean_var(channel);
            for (i, &t) in channel.iter().enumerate() {
                let e = 4.0 * (var + lambda) / ((t - mu) * (t - mu) + 2.0 * var + 2.0 * lambda);
                out[base + i] = t * sigmoid(1.0 / e);
            }
        }
    }
    out
}

/// Sequential composition: channel attention first, then spatial
/// attention on the channel-refined map.
pub fn pfcasa_reference(x: &[f64], dims: [usize; 4], lambda: f64, softmax: bool) -> Vec<f64> {
    let xc = pfca_reference(x, dims, lambda);
    sa_reference(&xc, dims, softmax)
}

/// Maximum absolute elementwise difference between two buffers.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
