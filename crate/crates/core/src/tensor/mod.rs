//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is a dynamically recorded tape: every op allocates a fresh
//! node holding its output values, strong references to its parents, and a
//! closure computing vector–Jacobian products. [`Tensor::backward`] walks
//! the tape once in reverse topological order, accumulates gradients in a
//! side table, and finally writes them into the leaves; the tape is freed
//! when the last output tensor is dropped.
//!
//! All values are 64-bit floats. Any op that produces NaN or Inf fails
//! immediately with [`Error::NonFinite`] instead of letting the poison
//! propagate — the same check runs on every gradient produced during
//! backward.

pub mod fd;
mod init;
mod ops;
mod optim;
mod serialize;

pub use init::{xavier_limit, ParamInit, Parameter, Registry};
pub use ops::concat;
pub use optim::{Adam, AdamConfig, Sgd};
pub use serialize::{
    checkpoint_bytes, file_sha256, load_checkpoint, load_tensor, read_tensor, save_checkpoint,
    save_tensor, sha256_hex, write_checkpoint, write_tensor,
};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Arguments handed to a VJP closure during backward.
pub(crate) struct VjpCtx<'a> {
    /// The op's original inputs, in the order they were recorded.
    pub parents: &'a [Tensor],
    /// The op's forward output values.
    pub out_values: &'a [f64],
    /// Gradient of the loss with respect to the op's output.
    pub out_grad: &'a [f64],
}

/// Computes per-parent gradients; `None` marks a parent that gets none
/// (non-differentiable slot or a parent that does not require grad).
pub(crate) type Vjp = Box<dyn Fn(&VjpCtx) -> Vec<Option<Vec<f64>>>>;

struct Inner {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    vjp: Option<Vjp>,
}

/// A dense row-major tensor; cheap to clone (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("op", &self.inner.op)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        vjp: Option<Vjp>,
    ) -> Result<Tensor> {
        if shape_len(&shape) != values.len() {
            return Err(Error::dim(
                op,
                format!("shape {shape:?} wants {} values, got {}", shape_len(&shape), values.len()),
            ));
        }
        check_finite(op, &values)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op,
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                vjp,
            }),
        })
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::build("new", shape.to_vec(), values, false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn leaf(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::build("leaf", shape.to_vec(), values, true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, vec![0.0; shape_len(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor> {
        Tensor::new(shape, vec![v; shape_len(shape)])
    }

    /// Record a new op node. Gradient tracking is inherited from the
    /// parents; when no parent requires grad the tape edges are dropped so
    /// pure-inference graphs stay flat.
    pub(crate) fn from_op(
        op: &'static str,
        parents: Vec<Tensor>,
        shape: Vec<usize>,
        values: Vec<f64>,
        vjp: Vjp,
    ) -> Result<Tensor> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::build(op, shape, values, true, parents, Some(vjp))
        } else {
            Tensor::build(op, shape, values, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        shape_len(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn op(&self) -> &'static str {
        self.inner.op
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the values in place.
    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.values.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("expected scalar, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.values.borrow()[0])
    }

    /// Overwrite a leaf's values in place, keeping the tensor's identity
    /// (optimizer updates, checkpoint loading, in-place perturbation).
    pub fn set_values(&self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::dim(
                "set_values",
                format!("expected {} values, got {}", self.len(), values.len()),
            ));
        }
        check_finite("set_values", &values)?;
        *self.inner.values.borrow_mut() = values;
        Ok(())
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the values with gradient tracking severed.
    pub fn detach(&self) -> Tensor {
        Tensor::build(
            "detach",
            self.inner.shape.clone(),
            self.to_vec(),
            false,
            Vec::new(),
            None,
        )
        .expect("detach of a valid tensor cannot fail")
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// every reachable leaf that requires grad; call [`Tensor::zero_grad`]
    /// between steps to reset.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::contract(
                "backward",
                "loss does not depend on any gradient-tracked tensor",
            ));
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(out_grad) = grads.remove(&node.id()) else {
                continue; // no gradient flowed here (e.g. a None vjp slot)
            };
            match &node.inner.vjp {
                None => {
                    if node.requires_grad() {
                        let mut slot = node.inner.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(g) => {
                                for (a, b) in g.iter_mut().zip(&out_grad) {
                                    *a += b;
                                }
                            }
                            None => *slot = Some(out_grad),
                        }
                    }
                }
                Some(vjp) => {
                    let out_values = node.inner.values.borrow();
                    let ctx = VjpCtx {
                        parents: &node.inner.parents,
                        out_values: &out_values,
                        out_grad: &out_grad,
                    };
                    let parent_grads = vjp(&ctx);
                    drop(out_values);
                    debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                    for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        if pg.len() != parent.len() {
                            return Err(Error::dim(
                                node.op(),
                                format!(
                                    "vjp produced {} values for parent of {} elements",
                                    pg.len(),
                                    parent.len()
                                ),
                            ));
                        }
                        check_finite(node.op(), &pg)?;
                        match grads.entry(parent.id()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-tracked subgraph (iterative, so deep chain
    /// graphs cannot overflow the stack).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Row-major strides for this tensor's shape.
    #[cfg(test)]
    fn strides(&self) -> Vec<usize> {
        strides_of(&self.inner.shape)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape_and_finiteness() {
        assert!(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        // zero-sized tensors are legal containers (empty sparse sets)
        assert!(Tensor::new(&[0], vec![]).is_ok());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn backward_requires_scalar() {
        let p = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(p.backward(), Err(Error::Contract { .. })));
    }

    #[test]
    fn sum_of_leaf_gives_unit_grads() {
        let p = Tensor::leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = p.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_parent_accumulates() {
        // loss = sum(p * p) at p = [1, 2] -> grad [2, 4]
        let p = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let loss = p.mul(&p).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let p = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let s = p.sum_all().unwrap();
        s.backward().unwrap();
        s.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 2.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn backward_linearity_over_loss_sum() {
        let make = || Tensor::leaf(&[2], vec![0.3, -0.7]).unwrap();

        // separate sweeps
        let p1 = make();
        p1.mul(&p1).unwrap().sum_all().unwrap().backward().unwrap();
        p1.sum_all().unwrap().backward().unwrap();
        let separate = p1.grad().unwrap();

        // one sweep over the summed loss
        let p2 = make();
        let a2 = p2.mul(&p2).unwrap().sum_all().unwrap();
        let b2 = p2.sum_all().unwrap();
        a2.add(&b2).unwrap().backward().unwrap();
        let joint = p2.grad().unwrap();

        assert_eq!(separate, joint);
    }

    #[test]
    fn no_grad_graph_drops_tape() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.mul(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.inner.parents.is_empty());
    }

    #[test]
    fn detach_severs_gradient_flow() {
        let p = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let d = p.mul(&p).unwrap().detach();
        assert!(!d.requires_grad());
        assert_eq!(d.to_vec(), vec![1.0, 4.0]);
    }
}
