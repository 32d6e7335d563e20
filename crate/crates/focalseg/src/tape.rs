//! Reverse-mode autodiff on an append-only tape.
//!
//! Every op pushes a node holding its output tensor and a one-shot backward
//! closure. Node ids are topological by construction (inputs are recorded
//! before outputs), so `backward` is a single reverse sweep over ids. Nodes
//! that no gradient can flow to (constants, and anything downstream of only
//! constants) carry no closure and are skipped entirely.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod attn;
mod conv;
mod elementwise;
mod gather;
mod linalg;

pub use attn::BIAS_PAD;
pub use gather::{GatherPlan, GATHER_PAD};

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn FnOnce(&[S], &mut Tape<S>) + Send>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    back: Option<BackFn<S>>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// When set, every op output is checked for non-finite values.
    pub validate: bool,
    ran_backward: bool,
    live_bytes: usize,
    peak_bytes: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), validate: false, ran_backward: false, live_bytes: 0, peak_bytes: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Peak bytes held in node values and gradient buffers so far.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn account(&mut self, elems: usize) {
        self.live_bytes += elems * std::mem::size_of::<S>();
        if self.live_bytes > self.peak_bytes {
            self.peak_bytes = self.live_bytes;
        }
    }

    /// Record an input tensor. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.account(value.numel());
        self.nodes.push(Node { value, grad: None, back: None, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<S>,
        needs_grad: bool,
        back: Option<BackFn<S>>,
    ) -> Result<Var> {
        if self.validate && !value.all_finite() {
            return Err(Error::Numeric("non-finite value produced by forward op".into()));
        }
        self.account(value.numel());
        debug_assert!(back.is_none() || needs_grad);
        self.nodes.push(Node { value, grad: None, back, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` root w.r.t. `v`, shaped like `value(v)`.
    /// `None` if no gradient reached it (or it was recorded as constant).
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape(), g.clone()).expect("grad buffer matches value shape")
        })
    }

    /// Mutable gradient accumulation buffer for `v`, zero-initialised on first
    /// touch. `None` when gradient tracking is off for this node, which lets
    /// backward closures skip work for pruned inputs.
    pub(crate) fn grad_buf(&mut self, v: Var) -> Option<&mut [S]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        if self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].value.numel();
            self.account(n);
            self.nodes[v.0].grad = Some(vec![S::ZERO; n]);
        }
        self.nodes[v.0].grad.as_deref_mut()
    }

    /// Reverse sweep from a scalar root. Single-shot per tape: backward
    /// closures are consumed. Afterwards every `requires_grad` leaf has a
    /// populated (possibly zero) gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Invariant("backward already ran on this tape".into()));
        }
        self.ran_backward = true;
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            ));
        }
        if !root_node.needs_grad {
            return Err(Error::Invariant("backward root does not track gradients".into()));
        }
        self.nodes[root.0].grad = Some(vec![S::ONE]);
        for i in (0..=root.0).rev() {
            let Some(back) = self.nodes[i].back.take() else { continue };
            let Some(g) = self.nodes[i].grad.take() else { continue };
            back(&g, self);
            self.nodes[i].grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.needs_grad && node.back.is_none() && node.grad.is_none() {
                node.grad = Some(vec![S::ZERO; node.value.numel()]);
            }
        }
        Ok(())
    }
}

/// Shape-equality guard shared by the binary elementwise ops.
fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip_and_constant_prune() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 3.0);
        assert!(tape.grad(b).is_none(), "constants accumulate no gradient");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn backward_is_single_shot() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.mul(a, a).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::zeros(&[3]), true);
        let y = tape.mul(a, a).unwrap();
        tape.backward(y).unwrap();
        let g = tape.grad(unused).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // y = a*a + a  =>  dy/da = 2a + 1
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(a, a).unwrap();
        let y = tape.add(sq, a).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 7.0);
    }

    #[test]
    fn validate_flags_non_finite() {
        let mut tape = Tape::<f64>::new();
        tape.validate = true;
        let a = tape.leaf(Tensor::scalar(-1.0), true);
        assert!(tape.sqrt(a).is_err(), "sqrt(-1) must be rejected in validate mode");
    }

    #[test]
    fn peak_bytes_grows_with_nodes() {
        let mut tape = Tape::<f32>::new();
        let before = tape.peak_bytes();
        tape.constant(Tensor::zeros(&[128]));
        assert_eq!(tape.peak_bytes(), before + 128 * 4);
    }
}
