use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Node, Var};
use crate::ops::Op;
use crate::real::Real;

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let y = self.value(x).to_vec();
        self.push("reshape", y, shape.to_vec(), Op::Reshape { x })
    }

    /// Selects rows (first-axis slices) of `x` in the given order; rows may
    /// repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some((&n, rest)) = xs.split_first() else {
            return Err(NumericsError::Shape { op: "gather_rows", lhs: xs, rhs: vec![] });
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumericsError::Shape { op: "gather_rows (index)", lhs: xs, rhs: vec![bad] });
        }
        let width: usize = rest.iter().product();
        let src = self.value(x);
        let mut y = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            y.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(rest);
        self.push("gather_rows", y, shape, Op::Gather { x, rows: rows.to_vec() })
    }
}

pub(super) fn gather_backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    x: Var,
    rows: &[usize],
    g: &[T],
) {
    let width: usize = nodes[x.0].shape[1..].iter().product();
    if let Some(dx) = buf.slot(x) {
        for (i, &r) in rows.iter().enumerate() {
            let dst = &mut dx[r * width..(r + 1) * width];
            dst.iter_mut().zip(&g[i * width..(i + 1) * width]).for_each(|(d, &v)| *d = *d + v);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn gather_scatters_gradient_back_to_repeated_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap().with_grad());
        let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y), &[5., 6., 1., 2., 5., 6.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }
}
