use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Var};
use crate::ops::Op;
use crate::real::Real;

impl<T: Real> Graph<T> {
    /// Max pooling over `k x k` windows of `x: [B, C, H, W]`. Ties go to the
    /// first maximal element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(NumericsError::Shape { op: "maxpool2d", lhs: xs, rhs: vec![k, k] });
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(NumericsError::Config {
                op: "maxpool2d",
                msg: format!("window {k} (stride {stride}) does not fit a {h}x{w} map"),
            });
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let input = self.value(x);
        let mut y = vec![T::zero(); batch * ch * ho * wo];
        let mut argmax = vec![0u32; batch * ch * ho * wo];
        // Scan window offsets in row-major order across a whole output row at
        // once; a strict comparison keeps the earliest maximum.
        for (plane_idx, (yp, ap)) in y.chunks_mut(ho * wo).zip(argmax.chunks_mut(ho * wo)).enumerate() {
            let base = plane_idx * h * w;
            for oy in 0..ho {
                let best = &mut yp[oy * wo..][..wo];
                let arg = &mut ap[oy * wo..][..wo];
                for dy in 0..k {
                    for dx in 0..k {
                        let start = base + (oy * stride + dy) * w + dx;
                        let row = &input[start..start + (wo - 1) * stride + 1];
                        let first = dy == 0 && dx == 0;
                        if stride == 1 {
                            scan_row(best, arg, row, start, 1, first);
                        } else {
                            scan_row(best, arg, row, start, stride, first);
                        }
                    }
                }
            }
        }
        self.push("maxpool2d", y, vec![batch, ch, ho, wo], Op::MaxPool { x, argmax })
    }
}

/// Folds one window offset into the running maxima of an output row.
/// Branch-free so random activations do not thrash the predictor.
#[inline(always)]
fn scan_row<T: Real>(best: &mut [T], arg: &mut [u32], row: &[T], start: usize, stride: usize, first: bool) {
    for ox in 0..best.len() {
        let v = row[ox * stride];
        let mask = ((first || v > best[ox]) as u32).wrapping_neg();
        let idx = (start + ox * stride) as u32;
        arg[ox] = (idx & mask) | (arg[ox] & !mask);
        best[ox] = if first { v } else { best[ox].max(v) };
    }
}

pub(super) fn backward<T: Real>(buf: &mut GradBuf<'_, T>, x: Var, argmax: &[u32], g: &[T]) {
    if let Some(dx) = buf.slot(x) {
        for (&src, &v) in argmax.iter().zip(g) {
            dx[src as usize] = dx[src as usize] + v;
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, NumericsError, Tensor};

    #[test]
    fn two_by_two_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.maxpool2d(x, 2, 1).unwrap();
        assert_eq!(g.value(y), &[4.0]);
    }

    #[test]
    fn ties_route_gradient_to_first_position() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 2.0).with_grad());
        let y = g.maxpool2d(x, 2, 1).unwrap();
        assert_eq!(g.value(y), &[2.0; 4]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // windows start at (0,0), (0,1), (1,0), (1,1); each picks its top-left
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[1, 1, 2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(g.maxpool2d(x, 3, 1), Err(NumericsError::Config { .. })));
    }
}
