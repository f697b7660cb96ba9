//! Differentiable operations. Each submodule adds forward methods to
//! [`Graph`](crate::Graph) and provides the matching backward rule.

mod conv;
mod dense;
mod elementwise;
mod gru;
mod loss;
mod norm;
mod pool;
mod shape;

pub use gru::GruVars;
pub use loss::softmax_rows;
pub use norm::RunningStats;

use crate::graph::{GradBuf, Node, Var};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d(Box<conv::ConvSaved>),
    MaxPool { x: Var, argmax: Vec<u32> },
    BatchNorm(Box<norm::BnSaved<T>>),
    Unary { x: Var, kind: UnaryKind },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Sum { x: Var },
    Reshape { x: Var },
    Gather { x: Var, rows: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    Gru(Box<gru::GruSaved<T>>),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T: Real> Op<T> {
    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Conv2d(s) => vec![s.x, s.k],
            Op::MaxPool { x, .. } => vec![*x],
            Op::BatchNorm(s) => vec![s.x, s.gamma, s.beta],
            Op::Unary { x, .. } | Op::Scale { x, .. } | Op::Sum { x } | Op::Reshape { x } => {
                vec![*x]
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Gather { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::Gru(s) => s.vars.all(s.x, s.h),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) fn backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    i: usize,
    g: &[T],
    gru_fault: Option<T>,
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => dense::backward(nodes, buf, *x, *w, *b, g),
        Op::Conv2d(s) => conv::backward(nodes, buf, s, g),
        Op::MaxPool { x, argmax } => pool::backward(buf, *x, argmax, g),
        Op::BatchNorm(s) => norm::backward(nodes, buf, s, g),
        Op::Unary { x, kind } => elementwise::unary_backward(buf, *x, *kind, &node.value, g),
        Op::Add { a, b } => {
            buf.add(*a, g);
            buf.add(*b, g);
        }
        Op::Sub { a, b } => {
            buf.add(*a, g);
            if let Some(slot) = buf.slot(*b) {
                slot.iter_mut().zip(g).for_each(|(s, &v)| *s = *s - v);
            }
        }
        Op::Mul { a, b } => elementwise::mul_backward(nodes, buf, *a, *b, g),
        Op::Scale { x, s } => {
            if let Some(slot) = buf.slot(*x) {
                slot.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *s);
            }
        }
        Op::Sum { x } => {
            if let Some(slot) = buf.slot(*x) {
                slot.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Reshape { x } => buf.add(*x, g),
        Op::Gather { x, rows } => shape::gather_backward(nodes, buf, *x, rows, g),
        Op::Dropout { x, mask } => {
            if let Some(slot) = buf.slot(*x) {
                slot.iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (&v, &m))| *d = *d + v * m);
            }
        }
        Op::Gru(s) => gru::backward(nodes, buf, s, g, gru_fault),
        Op::SoftmaxCe { logits, labels, probs } => loss::backward(buf, *logits, labels, probs, g),
    }
}
