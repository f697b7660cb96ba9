use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Mode, Node, Var};
use crate::ops::{Op, UnaryKind};
use crate::real::Real;

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, x: Var, kind: UnaryKind, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, y, shape, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu, "relu", |v| v.max(T::zero()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh, "tanh", |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid, "sigmoid", sigmoid)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, y, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add { a, b }, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub { a, b }, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul { a, b }, |p, q| p * q)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", y, shape, Op::Scale { x, s })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().copied().sum();
        self.push("sum", vec![total], vec![], Op::Sum { x })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p_drop` and survivors are scaled by `1/(1-p_drop)`.
    /// Eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p_drop: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(NumericsError::Config {
                op: "dropout",
                msg: format!("drop probability must lie in [0, 1), got {p_drop}"),
            });
        }
        let n = self.value(x).len();
        let mask: Vec<T> = if mode == Mode::Eval || p_drop == 0.0 {
            vec![T::one(); n]
        } else {
            let keep = T::of(1.0 / (1.0 - p_drop));
            (0..n).map(|_| if rng.random::<f64>() < p_drop { T::zero() } else { keep }).collect()
        };
        let y = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", y, shape, Op::Dropout { x, mask })
    }
}

pub(super) fn unary_backward<T: Real>(buf: &mut GradBuf<'_, T>, x: Var, kind: UnaryKind, y: &[T], g: &[T]) {
    let Some(dx) = buf.slot(x) else { return };
    for ((d, &out), &gv) in dx.iter_mut().zip(y).zip(g) {
        let local = match kind {
            UnaryKind::Relu => {
                if out > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Tanh => T::one() - out * out,
            UnaryKind::Sigmoid => out * (T::one() - out),
        };
        *d = *d + gv * local;
    }
}

pub(super) fn mul_backward<T: Real>(nodes: &[Node<T>], buf: &mut GradBuf<'_, T>, a: Var, b: Var, g: &[T]) {
    if let Some(da) = buf.slot(a) {
        let bv = &nodes[b.0].value;
        da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&gv, &v))| *d = *d + gv * v);
    }
    if let Some(db) = buf.slot(b) {
        let av = &nodes[a.0].value;
        db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&gv, &v))| *d = *d + gv * v);
    }
}
