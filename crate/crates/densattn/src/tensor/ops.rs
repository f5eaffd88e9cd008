//! Elementwise, broadcast, and reduction primitives with their gradients.

use super::autograd::{output_requires_grad, Contributions, Node};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Axis selection for reductions. Selected axes collapse to size 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axes {
    pub n: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub fn all() -> Axes {
        Axes { n: true, c: true, h: true, w: true }
    }
    /// H and W.
    pub fn spatial() -> Axes {
        Axes { n: false, c: false, h: true, w: true }
    }
    pub fn channel() -> Axes {
        Axes { n: false, c: true, h: false, w: false }
    }
    pub fn height() -> Axes {
        Axes { n: false, c: false, h: true, w: false }
    }
    pub fn width() -> Axes {
        Axes { n: false, c: false, h: false, w: true }
    }

    fn reduced(&self, s: Shape) -> Shape {
        Shape::new(
            if self.n { 1 } else { s.n },
            if self.c { 1 } else { s.c },
            if self.h { 1 } else { s.h },
            if self.w { 1 } else { s.w },
        )
    }

    fn count(&self, s: Shape) -> usize {
        let mut k = 1;
        if self.n {
            k *= s.n;
        }
        if self.c {
            k *= s.c;
        }
        if self.h {
            k *= s.h;
        }
        if self.w {
            k *= s.w;
        }
        k
    }
}

/// Pooling flavor for [`Tensor::pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[inline(always)]
fn src_index(s: &Shape, n: usize, c: usize, h: usize, w: usize) -> usize {
    // Broadcast read: dims of size 1 pin to index 0.
    s.index(
        if s.n == 1 { 0 } else { n },
        if s.c == 1 { 0 } else { c },
        if s.h == 1 { 0 } else { h },
        if s.w == 1 { 0 } else { w },
    )
}

/// Apply `f` over the broadcast of `a` and `b`; `df` receives
/// (a_i, b_i, grad_out_i) and returns (da_i, db_i) for accumulation.
fn binary_op(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    df: fn(f64, f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    let sa = a.shape();
    let sb = b.shape();
    let so = sa.broadcast_with(&sb, op)?;
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(so.numel());
    if sa == sb {
        for (&x, &y) in ad.iter().zip(bd.iter()) {
            out.push(f(x, y));
        }
    } else {
        for n in 0..so.n {
            for c in 0..so.c {
                for h in 0..so.h {
                    for w in 0..so.w {
                        out.push(f(ad[src_index(&sa, n, c, h, w)], bd[src_index(&sb, n, c, h, w)]));
                    }
                }
            }
        }
    }
    drop(ad);
    drop(bd);

    let record = output_requires_grad(&[a, b]);
    let node = record.then(|| {
        let (pa, pb) = (a.clone(), b.clone());
        let need_a = a.requires_grad() || pa.inner.node.borrow().is_some();
        let need_b = b.requires_grad() || pb.inner.node.borrow().is_some();
        Node::new(vec![a.clone(), b.clone()], move |go: &[f64]| {
            let ad = pa.data();
            let bd = pb.data();
            let mut da = need_a.then(|| vec![0.0; sa.numel()]);
            let mut db = need_b.then(|| vec![0.0; sb.numel()]);
            let mut i = 0;
            for n in 0..so.n {
                for c in 0..so.c {
                    for h in 0..so.h {
                        for w in 0..so.w {
                            let ia = src_index(&sa, n, c, h, w);
                            let ib = src_index(&sb, n, c, h, w);
                            let (ga, gb) = df(ad[ia], bd[ib], go[i]);
                            if let Some(da) = da.as_mut() {
                                da[ia] += ga;
                            }
                            if let Some(db) = db.as_mut() {
                                db[ib] += gb;
                            }
                            i += 1;
                        }
                    }
                }
            }
            vec![da, db] as Contributions
        })
    });
    Ok(Tensor::from_parts(so, out, record, node))
}

/// Unary op where the derivative is a function of the *output* value.
fn unary_from_output(x: &Tensor, f: fn(f64) -> f64, dydx_of_y: fn(f64) -> f64) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let record = output_requires_grad(&[x]);
    let node = record.then(|| {
        let y = out.clone();
        Node::new(vec![x.clone()], move |go: &[f64]| {
            let dx = go
                .iter()
                .zip(y.iter())
                .map(|(&g, &yv)| g * dydx_of_y(yv))
                .collect();
            vec![Some(dx)] as Contributions
        })
    });
    Tensor::from_parts(x.shape(), out, record, node)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("add", self, other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("sub", self, other, |a, b| a - b, |_, _, g| (g, -g))
    }

    /// Elementwise multiply with broadcasting over singleton dims.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("mul", self, other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary_op(
            "div",
            self,
            other,
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| scale * v + shift).collect();
        let record = output_requires_grad(&[self]);
        let node = record.then(|| {
            Node::new(vec![self.clone()], move |go: &[f64]| {
                vec![Some(go.iter().map(|&g| g * scale).collect())] as Contributions
            })
        });
        Tensor::from_parts(self.shape(), out, record, node)
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let record = output_requires_grad(&[self]);
        let node = record.then(|| {
            let x = self.clone();
            Node::new(vec![self.clone()], move |go: &[f64]| {
                let xd = x.data();
                let dx = go
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(dx)] as Contributions
            })
        });
        Tensor::from_parts(self.shape(), out, record, node)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_from_output(self, |v| 1.0 / (1.0 + (-v).exp()), |y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        unary_from_output(self, f64::exp, |y| y)
    }

    pub fn recip(&self) -> Tensor {
        unary_from_output(self, |v| 1.0 / v, |y| -y * y)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Sum over the selected axes (selected dims collapse to 1).
    pub fn reduce_sum(&self, axes: Axes) -> Result<Tensor> {
        let si = self.shape();
        let so = axes.reduced(si);
        let mut out = vec![0.0; so.numel()];
        {
            let d = self.data();
            let mut i = 0;
            for n in 0..si.n {
                for c in 0..si.c {
                    for h in 0..si.h {
                        for w in 0..si.w {
                            out[src_index(&so, n, c, h, w)] += d[i];
                            i += 1;
                        }
                    }
                }
            }
        }
        let record = output_requires_grad(&[self]);
        let node = record.then(|| {
            Node::new(vec![self.clone()], move |go: &[f64]| {
                let mut dx = Vec::with_capacity(si.numel());
                for n in 0..si.n {
                    for c in 0..si.c {
                        for h in 0..si.h {
                            for w in 0..si.w {
                                dx.push(go[src_index(&so, n, c, h, w)]);
                            }
                        }
                    }
                }
                vec![Some(dx)] as Contributions
            })
        });
        Ok(Tensor::from_parts(so, out, record, node))
    }

    /// Mean over the selected axes (population convention: divide by count).
    pub fn reduce_mean(&self, axes: Axes) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::invalid("reduce_mean", "empty tensor"));
        }
        let k = axes.count(self.shape());
        Ok(self.reduce_sum(axes)?.affine(1.0 / k as f64, 0.0))
    }

    /// Max over the selected axes; gradient flows to the first maximal
    /// element of each group.
    pub fn reduce_max(&self, axes: Axes) -> Result<Tensor> {
        let si = self.shape();
        let so = axes.reduced(si);
        let mut out = vec![f64::NEG_INFINITY; so.numel()];
        let mut arg = vec![0usize; so.numel()];
        {
            let d = self.data();
            let mut i = 0;
            for n in 0..si.n {
                for c in 0..si.c {
                    for h in 0..si.h {
                        for w in 0..si.w {
                            let o = src_index(&so, n, c, h, w);
                            if d[i] > out[o] {
                                out[o] = d[i];
                                arg[o] = i;
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
        let record = output_requires_grad(&[self]);
        let node = record.then(|| {
            let numel = si.numel();
            Node::new(vec![self.clone()], move |go: &[f64]| {
                let mut dx = vec![0.0; numel];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += go[o];
                }
                vec![Some(dx)] as Contributions
            })
        });
        Ok(Tensor::from_parts(so, out, record, node))
    }

    /// Population mean and variance over the selected axes, both
    /// differentiable (variance built from mean compositions).
    pub fn moments(&self, axes: Axes) -> Result<(Tensor, Tensor)> {
        let mean = self.reduce_mean(axes)?;
        let centered = self.sub(&mean)?;
        let var = centered.square()?.reduce_mean(axes)?;
        Ok((mean, var))
    }

    /// Sum over channels, keeping spatial dims: N×C×H×W → N×1×H×W.
    pub fn channel_sum(&self) -> Result<Tensor> {
        self.reduce_sum(Axes::channel())
    }

    /// Concatenate along the channel axis. All inputs must agree on N, H,
    /// and W.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no tensors given"));
        }
        let first = parts[0].shape();
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("shape {s} does not match {first} on N/H/W"),
                ));
            }
            c_total += s.c;
        }
        let so = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Vec::with_capacity(so.numel());
        for n in 0..so.n {
            for p in parts {
                let s = p.shape();
                let d = p.data();
                let plane = s.c * s.h * s.w;
                out.extend_from_slice(&d[n * plane..(n + 1) * plane]);
            }
        }
        let refs: Vec<&Tensor> = parts.to_vec();
        let record = output_requires_grad(&refs);
        let node = record.then(|| {
            let shapes: Vec<Shape> = parts.iter().map(|p| p.shape()).collect();
            let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            Node::new(parents, move |go: &[f64]| {
                let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
                let mut offset = 0;
                for _n in 0..so.n {
                    for (i, s) in shapes.iter().enumerate() {
                        let plane = s.c * s.h * s.w;
                        grads[i].extend_from_slice(&go[offset..offset + plane]);
                        offset += plane;
                    }
                }
                grads.into_iter().map(Some).collect::<Contributions>()
            })
        });
        Ok(Tensor::from_parts(so, out, record, node))
    }

    /// Mean over H and W: N×C×H×W → N×C×1×1.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        self.reduce_mean(Axes::spatial())
    }
}

/// Global average pooling (free-function form of
/// [`Tensor::global_avg_pool`]).
pub fn gap(x: &Tensor) -> Result<Tensor> {
    x.global_avg_pool()
}

/// Softmax over the flattened H·W positions of each (n, c) slice,
/// max-shifted for overflow safety. Weights sum to 1 per slice.
pub fn spatial_softmax(s: &Tensor) -> Result<Tensor> {
    let shift = s.reduce_max(Axes::spatial())?.detach();
    let e = s.sub(&shift)?.exp();
    let denom = e.reduce_sum(Axes::spatial())?;
    e.div(&denom)
}

/// Population mean and variance of a plain vector (divide by count).
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    assert!(!v.is_empty(), "mean_var of empty vector");
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor {
        Tensor::from_data(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::scalar(0.0);
        assert_eq!(x.sigmoid().item().unwrap(), 0.5);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(Shape::new(1, 1, 1, 2), vec![-3.0, 3.0]);
        assert_eq!(*x.relu().data(), vec![0.0, 3.0]);
    }

    #[test]
    fn broadcast_mul_scales_each_channel() {
        // X[2,4,3,3] * V[2,4,1,1]: every channel scaled by its scalar.
        let x = Tensor::from_fn(Shape::new(2, 4, 3, 3), |n, c, h, w| {
            (n * 100 + c * 10 + h * 3 + w) as f64
        });
        let v = Tensor::from_fn(Shape::new(2, 4, 1, 1), |n, c, _, _| (1 + n * 4 + c) as f64);
        let y = x.mul(&v).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                for h in 0..3 {
                    for w in 0..3 {
                        let expect = x.at(n, c, h, w) * v.at(n, c, 0, 0);
                        assert_eq!(y.at(n, c, h, w), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_mul_is_commutative_in_value() {
        let a = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, h, w| (c + h + w) as f64 - 1.5);
        let b = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_, c, _, _| 0.5 * c as f64 + 0.25);
        let ab = a.mul(&b).unwrap();
        let ba = b.mul(&a).unwrap();
        assert_eq!(*ab.data(), *ba.data());
    }

    #[test]
    fn incompatible_shapes_error_names_dimension() {
        let a = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 4, 2, 2));
        let err = a.mul(&b).unwrap_err().to_string();
        assert!(err.contains("dim C"), "unexpected message: {err}");
    }

    #[test]
    fn gap_of_constant_channel_is_constant() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, _, _| (c + 1) as f64 * 2.5);
        let g = gap(&x).unwrap();
        assert_eq!(g.at(0, 0, 0, 0), 2.5);
        assert_eq!(g.at(0, 1, 0, 0), 5.0);
    }

    #[test]
    fn channel_sum_adds_channels() {
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, _, _| (c + 1) as f64);
        let s = x.channel_sum().unwrap();
        assert_eq!(s.shape(), Shape::new(1, 1, 2, 2));
        assert!(s.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn mean_var_population_convention() {
        let (m, v) = mean_var(&[0.0, 2.0]);
        assert_eq!((m, v), (1.0, 1.0));
    }

    #[test]
    fn moments_match_plain_mean_var() {
        let vals = vec![0.3, -1.2, 2.5, 0.0, 1.1, -0.4];
        let x = t(Shape::new(1, 1, 1, 6), vals.clone());
        let (m, v) = x.moments(Axes::all()).unwrap();
        let (em, ev) = mean_var(&vals);
        assert!((m.item().unwrap() - em).abs() < 1e-15);
        assert!((v.item().unwrap() - ev).abs() < 1e-15);
    }

    #[test]
    fn spatial_softmax_sums_to_one() {
        let x = Tensor::from_fn(Shape::new(2, 1, 3, 4), |n, _, h, w| {
            (n as f64) * 0.7 + (h as f64) * 1.3 - (w as f64) * 0.9
        });
        let p = spatial_softmax(&x).unwrap();
        for n in 0..2 {
            let sum: f64 = (0..3)
                .flat_map(|h| (0..4).map(move |w| (h, w)))
                .map(|(h, w)| p.at(n, 0, h, w))
                .sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum = {sum}");
        }
    }

    #[test]
    fn spatial_softmax_is_overflow_safe() {
        let x = t(Shape::new(1, 1, 1, 3), vec![1000.0, 1000.0, 1000.0]);
        let p = spatial_softmax(&x).unwrap();
        for v in p.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_max_routes_gradient_to_argmax() {
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 4.0, 3.0, 2.0]).requires_grad_leaf();
        let m = x.reduce_max(Axes::spatial()).unwrap();
        assert_eq!(m.item().unwrap(), 4.0);
        backward(&m).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn division_gradients() {
        // f = sum(a / b); da = 1/b, db = -a/b^2
        let a = t(Shape::new(1, 1, 1, 2), vec![2.0, 6.0]).requires_grad_leaf();
        let b = t(Shape::new(1, 1, 1, 2), vec![2.0, 3.0]).requires_grad_leaf();
        let loss = a.div(&b).unwrap().reduce_sum(Axes::all()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.5, 1.0 / 3.0]);
        assert_eq!(b.grad().unwrap(), vec![-0.5, -6.0 / 9.0]);
    }

    #[test]
    fn broadcast_grad_reduces_over_expanded_dims() {
        // y = x * v with v per-channel; dv = sum over spatial of x.
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| (c * 4 + h * 2 + w) as f64);
        let v = t(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).requires_grad_leaf();
        let loss = x.mul(&v).unwrap().reduce_sum(Axes::all()).unwrap();
        backward(&loss).unwrap();
        // channel 0 holds 0+1+2+3=6, channel 1 holds 4+5+6+7=22
        assert_eq!(v.grad().unwrap(), vec![6.0, 22.0]);
    }
}
