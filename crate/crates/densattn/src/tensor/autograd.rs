//! Reverse-mode differentiation over a per-forward-pass tape.

use std::cell::Cell;
use std::collections::HashSet;

use super::Tensor;
use crate::error::{Error, Result};

/// Gradient contributions aligned with a node's parent list. `None` marks
/// a parent that does not need a gradient.
pub(crate) type Contributions = Vec<Option<Vec<f64>>>;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Box<dyn FnOnce(&[f64]) -> Contributions>,
}

impl Node {
    pub(crate) fn new(
        parents: Vec<Tensor>,
        backward: impl FnOnce(&[f64]) -> Contributions + 'static,
    ) -> Node {
        Node {
            parents,
            backward: Box::new(backward),
        }
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording the tape; forwards inside are inference-only.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

/// Whether an op should record a node for these inputs.
pub(crate) fn should_record(inputs: &[&Tensor]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.requires_grad() || t.inner.node.borrow().is_some())
}

/// Output `requires_grad` flag for an op over `inputs`.
pub(crate) fn output_requires_grad(inputs: &[&Tensor]) -> bool {
    should_record(inputs)
}

/// Propagate gradients from a scalar `loss` to every reachable tensor with
/// `requires_grad`. Consumes the tape: nodes are taken and dropped, so a
/// second backward over the same graph is impossible.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { numel: loss.numel() });
    }

    // Topological order by iterative DFS; children before parents after
    // reversal of the postorder.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // Stack entries: (tensor, parents_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.inner.node.borrow().as_ref() {
            for p in &node.parents {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    loss.accumulate_grad(&[1.0]);

    for t in order.iter().rev() {
        let node = t.inner.node.borrow_mut().take();
        let Some(node) = node else { continue };
        let grad_out = match t.inner.grad.borrow().as_ref() {
            Some(g) => g.clone(),
            None => continue, // not on any path that received a gradient
        };
        let contributions = (node.backward)(&grad_out);
        debug_assert_eq!(contributions.len(), node.parents.len());
        for (parent, contrib) in node.parents.iter().zip(contributions) {
            if let Some(c) = contrib {
                if parent.requires_grad() || parent.inner.node.borrow().is_some() {
                    parent.accumulate_grad(&c);
                }
            }
        }
        // Intermediate grads are only needed to feed their own node.
        if !t.requires_grad() {
            t.zero_grad();
        }
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Axes, Shape};

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::from_data(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            backward(&x),
            Err(Error::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn sum_of_squares_gradient_is_analytic() {
        // f(x) = sum(x^2), grad = 2x
        let x = Tensor::from_data(Shape::new(1, 1, 1, 2), vec![1.0, 2.0])
            .unwrap()
            .requires_grad_leaf();
        let sq = x.mul(&x).unwrap();
        let loss = sq.reduce_sum(Axes::all()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // f(x) = sum(x*x + x) => grad = 2x + 1
        let x = Tensor::from_data(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0])
            .unwrap()
            .requires_grad_leaf();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let loss = y.reduce_sum(Axes::all()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn no_grad_skips_tape() {
        let x = Tensor::from_data(Shape::new(1, 1, 1, 2), vec![1.0, 2.0])
            .unwrap()
            .requires_grad_leaf();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(y.inner.node.borrow().is_none());
    }

    #[test]
    fn tape_is_consumed_by_backward() {
        let x = Tensor::scalar(3.0).requires_grad_leaf();
        let y = x.mul(&x).unwrap();
        backward(&y).unwrap();
        assert!(y.inner.node.borrow().is_none());
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
