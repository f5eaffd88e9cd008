//! 2-D convolution and pooling with gradients.
//!
//! The accumulation order per output cell is fixed (input channel, then
//! kernel row, then kernel column), matching the naive reference
//! implementation bit for bit while keeping the inner loops contiguous.

use rayon::prelude::*;

use super::autograd::{output_requires_grad, Contributions, Node};
use super::ops::PoolKind;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Work below this many output elements is not worth a rayon dispatch.
const PAR_THRESHOLD: usize = 4096;

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Valid output range [lo, hi) such that `o*stride + tap_offset` lands in
/// `[0, limit)`, where `tap_offset = k_idx*dilation - pad`.
#[inline]
fn valid_range(out_len: usize, stride: usize, tap_offset: isize, limit: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if tap_offset < 0 {
        ((-tap_offset) + s - 1) / s
    } else {
        0
    };
    let hi_excl = {
        let top = limit as isize - 1 - tap_offset;
        if top < 0 {
            0
        } else {
            top / s + 1
        }
    };
    let lo = (lo.max(0) as usize).min(out_len);
    let hi = (hi_excl.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

struct ConvDims {
    xs: Shape,
    ws: Shape,
    os: Shape,
    stride: usize,
    pad: usize,
    dilation: usize,
}

fn conv_forward_into(out: &mut [f64], n: usize, co: usize, x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) {
    let (xs, ws, os) = (&d.xs, &d.ws, &d.os);
    let init = bias.map_or(0.0, |b| b[co]);
    out.fill(init);
    for ci in 0..xs.c {
        for kh in 0..ws.h {
            let off_h = (kh * d.dilation) as isize - d.pad as isize;
            let (oh_lo, oh_hi) = valid_range(os.h, d.stride, off_h, xs.h);
            for kw in 0..ws.w {
                let wv = w[ws.index(co, ci, kh, kw)];
                let off_w = (kw * d.dilation) as isize - d.pad as isize;
                let (ow_lo, ow_hi) = valid_range(os.w, d.stride, off_w, xs.w);
                for oh in oh_lo..oh_hi {
                    let ih = (oh * d.stride) as isize + off_h;
                    let xrow = xs.index(n, ci, ih as usize, 0);
                    let orow = oh * os.w;
                    for ow in ow_lo..ow_hi {
                        let iw = (ow * d.stride) as isize + off_w;
                        out[orow + ow] += wv * x[xrow + iw as usize];
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution. `weight` has shape Cout×Cin×kh×kw; `bias`, when
    /// present, has shape 1×Cout×1×1. Differentiable w.r.t. input,
    /// weight, and bias.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels (dim C) but kernel expects {}", xs.c, ws.c),
            ));
        }
        if let Some(b) = bias {
            let bs = b.shape();
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {bs} does not match 1x{}x1x1 (dim C = Cout)", ws.n),
                ));
            }
        }
        let oh = conv_out_dim(xs.h, ws.h, stride, pad, dilation).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel span exceeds padded input height (dim H = {})", xs.h),
            )
        })?;
        let ow = conv_out_dim(xs.w, ws.w, stride, pad, dilation).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel span exceeds padded input width (dim W = {})", xs.w),
            )
        })?;
        let os = Shape::new(xs.n, ws.n, oh, ow);
        let dims = ConvDims { xs, ws, os, stride, pad, dilation };

        let mut out = vec![0.0; os.numel()];
        {
            let xd_guard = self.data();
            let wd_guard = weight.data();
            let xd: &[f64] = &xd_guard;
            let wd: &[f64] = &wd_guard;
            let bd = bias.map(|b| b.to_vec());
            let bd_slice = bd.as_deref();
            let dims_ref = &dims;
            let plane = os.h * os.w;
            let run = move |(plane_idx, slot): (usize, &mut [f64])| {
                let n = plane_idx / os.c;
                let co = plane_idx % os.c;
                conv_forward_into(slot, n, co, xd, wd, bd_slice, dims_ref);
            };
            if os.numel() >= PAR_THRESHOLD {
                out.par_chunks_mut(plane).enumerate().for_each(run);
            } else {
                out.chunks_mut(plane).enumerate().for_each(run);
            }
        }

        let inputs: Vec<&Tensor> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let record = output_requires_grad(&inputs);
        let node = record.then(|| {
            let x = self.clone();
            let w = weight.clone();
            let has_bias = bias.is_some();
            let parents: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
            let dims = ConvDims { xs, ws, os, stride, pad, dilation };
            Node::new(parents, move |go: &[f64]| {
                let (dx, dw, db) = conv_backward(go, &x, &w, has_bias, &dims);
                let mut contrib: Contributions = vec![Some(dx), Some(dw)];
                if has_bias {
                    contrib.push(Some(db));
                }
                contrib
            })
        });
        Ok(Tensor::from_parts(os, out, record, node))
    }

    /// Windowed max/avg pooling without padding.
    pub fn pool(&self, kind: PoolKind, k: usize, stride: usize) -> Result<Tensor> {
        let xs = self.shape();
        if k == 0 || stride == 0 {
            return Err(Error::invalid("pool", "window and stride must be >= 1"));
        }
        if k > xs.h || k > xs.w {
            return Err(Error::invalid(
                "pool",
                format!("window {k} exceeds input {}x{}", xs.h, xs.w),
            ));
        }
        let oh = (xs.h - k) / stride + 1;
        let ow = (xs.w - k) / stride + 1;
        let os = Shape::new(xs.n, xs.c, oh, ow);
        let mut out = vec![0.0; os.numel()];
        let mut argmax = matches!(kind, PoolKind::Max).then(|| vec![0usize; os.numel()]);
        {
            let xd = self.data();
            let mut o = 0;
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for ohh in 0..oh {
                        for oww in 0..ow {
                            let h0 = ohh * stride;
                            let w0 = oww * stride;
                            match kind {
                                PoolKind::Max => {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_idx = 0;
                                    for dh in 0..k {
                                        for dw in 0..k {
                                            let idx = xs.index(n, c, h0 + dh, w0 + dw);
                                            if xd[idx] > best {
                                                best = xd[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                    out[o] = best;
                                    argmax.as_mut().unwrap()[o] = best_idx;
                                }
                                PoolKind::Avg => {
                                    let mut acc = 0.0;
                                    for dh in 0..k {
                                        for dw in 0..k {
                                            acc += xd[xs.index(n, c, h0 + dh, w0 + dw)];
                                        }
                                    }
                                    out[o] = acc / (k * k) as f64;
                                }
                            }
                            o += 1;
                        }
                    }
                }
            }
        }

        let record = output_requires_grad(&[self]);
        let node = record.then(|| {
            let numel = xs.numel();
            Node::new(vec![self.clone()], move |go: &[f64]| {
                let mut dx = vec![0.0; numel];
                match &argmax {
                    Some(arg) => {
                        for (o, &src) in arg.iter().enumerate() {
                            dx[src] += go[o];
                        }
                    }
                    None => {
                        let inv = 1.0 / (k * k) as f64;
                        let mut o = 0;
                        for n in 0..xs.n {
                            for c in 0..xs.c {
                                for ohh in 0..oh {
                                    for oww in 0..ow {
                                        let g = go[o] * inv;
                                        for dh in 0..k {
                                            for dw in 0..k {
                                                dx[xs.index(n, c, ohh * stride + dh, oww * stride + dw)] += g;
                                            }
                                        }
                                        o += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)] as Contributions
            })
        });
        Ok(Tensor::from_parts(os, out, record, node))
    }

    pub fn max_pool(&self, k: usize, stride: usize) -> Result<Tensor> {
        self.pool(PoolKind::Max, k, stride)
    }

    pub fn avg_pool(&self, k: usize, stride: usize) -> Result<Tensor> {
        self.pool(PoolKind::Avg, k, stride)
    }
}

fn conv_backward(
    go: &[f64],
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xs, ws, os) = (d.xs, d.ws, d.os);
    let xd_guard = x.data();
    let wd_guard = w.data();
    let xd: &[f64] = &xd_guard;
    let wd: &[f64] = &wd_guard;

    // d/d input: scatter go * w into the input plane (n, ci).
    let mut dx = vec![0.0; xs.numel()];
    {
        let plane = xs.h * xs.w;
        let run = |(plane_idx, slot): (usize, &mut [f64])| {
            let n = plane_idx / xs.c;
            let ci = plane_idx % xs.c;
            for co in 0..os.c {
                for kh in 0..ws.h {
                    let off_h = (kh * d.dilation) as isize - d.pad as isize;
                    let (oh_lo, oh_hi) = valid_range(os.h, d.stride, off_h, xs.h);
                    for kw in 0..ws.w {
                        let wv = wd[ws.index(co, ci, kh, kw)];
                        let off_w = (kw * d.dilation) as isize - d.pad as isize;
                        let (ow_lo, ow_hi) = valid_range(os.w, d.stride, off_w, xs.w);
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * d.stride) as isize + off_h) as usize;
                            let grow = os.index(n, co, oh, 0);
                            let xrow = ih * xs.w;
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * d.stride) as isize + off_w) as usize;
                                slot[xrow + iw] += go[grow + ow] * wv;
                            }
                        }
                    }
                }
            }
        };
        if xs.numel() >= PAR_THRESHOLD {
            dx.par_chunks_mut(plane).enumerate().for_each(run);
        } else {
            dx.chunks_mut(plane).enumerate().for_each(run);
        }
    }

    // d/d weight: correlate go with x.
    let mut dw = vec![0.0; ws.numel()];
    {
        let per_co = ws.c * ws.h * ws.w;
        let run = |(co, slot): (usize, &mut [f64])| {
            for ci in 0..ws.c {
                for kh in 0..ws.h {
                    let off_h = (kh * d.dilation) as isize - d.pad as isize;
                    let (oh_lo, oh_hi) = valid_range(os.h, d.stride, off_h, xs.h);
                    for kw in 0..ws.w {
                        let off_w = (kw * d.dilation) as isize - d.pad as isize;
                        let (ow_lo, ow_hi) = valid_range(os.w, d.stride, off_w, xs.w);
                        let mut acc = 0.0;
                        for n in 0..xs.n {
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * d.stride) as isize + off_h) as usize;
                                let grow = os.index(n, co, oh, 0);
                                let xrow = xs.index(n, ci, ih, 0);
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * d.stride) as isize + off_w) as usize;
                                    acc += go[grow + ow] * xd[xrow + iw];
                                }
                            }
                        }
                        slot[(ci * ws.h + kh) * ws.w + kw] = acc;
                    }
                }
            }
        };
        if ws.numel() >= PAR_THRESHOLD {
            dw.par_chunks_mut(per_co).enumerate().for_each(run);
        } else {
            dw.chunks_mut(per_co).enumerate().for_each(run);
        }
    }

    // d/d bias: sum go over batch and spatial dims.
    let mut db = Vec::new();
    if has_bias {
        db = vec![0.0; os.c];
        for n in 0..os.n {
            for co in 0..os.c {
                let base = os.index(n, co, 0, 0);
                let mut acc = 0.0;
                for i in 0..os.h * os.w {
                    acc += go[base + i];
                }
                db[co] += acc;
            }
        }
    }

    (dx, dw, db)
}
