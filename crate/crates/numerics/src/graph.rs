use std::sync::OnceLock;

use crate::error::{NumericsError, Result};
use crate::ops::{self, Op};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T: Real> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Whether layers with train/eval behaviour (batch norm, dropout) run in
/// training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

fn finite_checks_from_env() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var("NUMERICS_CHECK_FINITE").map(|v| v == "1").unwrap_or(false)
    })
}

/// Reverse-mode tape. Every op appends a node; [`Graph::backward`] walks the
/// tape once in reverse.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(Var, ParamId)>,
    check_finite: bool,
    pub(crate) gru_backward_fault: Option<T>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            check_finite: finite_checks_from_env(),
            gru_backward_fault: None,
        }
    }

    /// Turns per-op NaN/Inf detection on or off (default: `NUMERICS_CHECK_FINITE=1`).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Scales the reset-path weight gradient of every GRU cell by
    /// `1 + eps`. Only useful for demonstrating that gradient checks catch a
    /// broken backward pass.
    #[doc(hidden)]
    pub fn perturb_gru_backward(&mut self, eps: T) {
        self.gru_backward_fault = Some(eps);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { value: tensor.into_data(), shape, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Copies a stored parameter onto the tape and remembers the binding so
    /// its gradient can be written back with [`Graph::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bindings.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Vec<T>,
        shape: Vec<usize>,
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>(), "{op_name}");
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, shape, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar node. Gradients of earlier passes are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        let fault = self.gru_backward_fault;
        let mut buf = GradBuf { nodes: &self.nodes, grads: &mut self.grads };
        for i in (0..=loss.0).rev() {
            let Some(g) = buf.grads[i].take() else { continue };
            if buf.nodes[i].requires_grad {
                let nodes = buf.nodes;
                ops::backward(nodes, &mut buf, i, &g, fault);
            }
            buf.grads[i] = Some(g);
        }
        if self.check_finite && self.grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradients of every bound parameter into its store.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        for &(v, id) in &self.bindings {
            match self.grad(v) {
                Some(g) => store.get_mut(id).accumulate_grad(g),
                None => {
                    // Parameter took part in the forward pass but not the loss.
                    let zeros = vec![T::zero(); self.nodes[v.0].value.len()];
                    store.get_mut(id).accumulate_grad(&zeros);
                }
            }
        }
    }
}

pub(crate) struct GradBuf<'a, T: Real> {
    nodes: &'a [Node<T>],
    pub grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Real> GradBuf<'_, T> {
    /// Mutable gradient slot of `v`, zero-initialized on first touch, or
    /// `None` if `v` does not need a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(slot) = self.slot(v) {
            slot.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        }
    }
}
