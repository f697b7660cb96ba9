use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate over every
/// input.
///
/// Returns the maximum over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
/// `f` is re-run for every perturbation, so it must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(NumericsError::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 5.0]).unwrap();
        let err = grad_check(|g, v| g.sum(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone().with_grad());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);

        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_scalar_output_is_a_usage_error() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, v| g.tanh(v[0]), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, NumericsError::Usage(_)));
    }
}
