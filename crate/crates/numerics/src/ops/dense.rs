use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Node, Var};
use crate::ops::Op;
use crate::real::{matmul, Mat, Real};

impl<T: Real> Graph<T> {
    /// `y = x Wᵀ + b` for `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NumericsError::Shape { op: "dense (x vs W)", lhs: xs, rhs: ws });
        }
        let (batch, fan_in, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(NumericsError::Shape {
                    op: "dense (W vs b)",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let bias = self.value(b);
            y.chunks_mut(out).for_each(|row| row.copy_from_slice(bias));
        }
        matmul(
            Mat::new(self.value(x), batch, fan_in),
            Mat::new(self.value(w), out, fan_in).t(),
            &mut y,
            b.is_some(),
        );
        self.push("dense", y, vec![batch, out], Op::Dense { x, w, b })
    }
}

pub(super) fn backward<T: Real>(
    nodes: &[Node<T>],
    buf: &mut GradBuf<'_, T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
) {
    let (batch, fan_in) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
    let out = nodes[w.0].shape[0];
    let dy = Mat::new(g, batch, out);
    if let Some(dx) = buf.slot(x) {
        matmul(dy, Mat::new(&nodes[w.0].value, out, fan_in), dx, true);
    }
    if let Some(dw) = buf.slot(w) {
        matmul(dy.t(), Mat::new(&nodes[x.0].value, batch, fan_in), dw, true);
    }
    if let Some(b) = b {
        if let Some(db) = buf.slot(b) {
            for row in g.chunks(out) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn identity_weights_pass_input_through() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = g.constant(&[1, 2], vec![2.0, 3.0]).unwrap();
        let b = g.constant(&[1], vec![1.0]).unwrap();
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[6.0]);
        assert_eq!(g.shape(y), &[1, 1]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let w = g.leaf(Tensor::zeros(&[4, 5]));
        let msg = g.dense(x, w, None).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }
}
