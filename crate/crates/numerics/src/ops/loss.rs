use crate::error::{NumericsError, Result};
use crate::graph::{GradBuf, Graph, Var};
use crate::ops::Op;
use crate::real::Real;

/// Row-wise softmax of a `[rows, classes]` buffer, max-subtracted.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

impl<T: Real> Graph<T> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(NumericsError::Shape {
                op: "softmax_cross_entropy (logits vs labels)",
                lhs: ls,
                rhs: vec![labels.len()],
            });
        }
        let classes = ls[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(NumericsError::Label { index, label, classes });
        }
        let x = self.value(logits);
        let mut loss = T::zero();
        for (row, &label) in x.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[label]);
        }
        loss = loss / T::of(labels.len() as f64);
        let probs = softmax_rows(x, classes);
        self.push(
            "softmax_cross_entropy",
            vec![loss],
            vec![],
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
        )
    }
}

pub(super) fn backward<T: Real>(
    buf: &mut GradBuf<'_, T>,
    logits: Var,
    labels: &[usize],
    probs: &[T],
    g: &[T],
) {
    let Some(dx) = buf.slot(logits) else { return };
    let batch = labels.len();
    let classes = probs.len() / batch;
    let scale = g[0] / T::of(batch as f64);
    for (i, &label) in labels.iter().enumerate() {
        for c in 0..classes {
            let onehot = if c == label { T::one() } else { T::zero() };
            let k = i * classes + c;
            dx[k] = dx[k] + (probs[k] - onehot) * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, NumericsError};

    #[test]
    fn uniform_logits_cost_ln2() {
        for label in 0..2 {
            let mut g = Graph::<f64>::new();
            let x = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
            let l = g.softmax_cross_entropy(x, &[label]).unwrap();
            assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_prediction_is_free() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 2], vec![40.0, -40.0]).unwrap();
        let l = g.softmax_cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l)[0] < 1e-10);
        assert!(g.value(l)[0] >= 0.0);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let l = g.softmax_cross_entropy(x, &[1]).unwrap();
        assert!((g.value(l)[0] - 2000.0).abs() < 1e-2);
    }

    #[test]
    fn out_of_range_label_reports_index() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let err = g.softmax_cross_entropy(x, &[0, 1, 2]).unwrap_err();
        assert_eq!(err, NumericsError::Label { index: 2, label: 2, classes: 2 });
    }
}
