//! Central-difference gradient checking. 64-bit only; single precision
//! finite differences drown in rounding noise.

use super::Tensor;
use crate::error::{Error, Result};

/// Compare `backward` gradients of `f` against central finite differences.
/// Returns the maximum relative error over every element of every input.
///
/// The relative error of a pair (analytic a, numeric n) is
/// |a − n| / max(|a|, |n|, 1).
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("grad_check: eps {eps} not in (0, 1e-2]")));
    }
    let vars: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(s, d)| Tensor::var(s, d.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&vars)?;
    loss.backward()?;

    let eval = |points: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let ts: Vec<Tensor<f64>> = points
            .iter()
            .map(|(s, d)| Tensor::new(s, d.clone()))
            .collect::<Result<_>>()?;
        f(&ts)?.item()
    };

    let mut max_err = 0.0_f64;
    for (vi, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .unwrap_or_else(|| vec![0.0; var.numel()]);
        for ei in 0..var.numel() {
            let mut plus = inputs.to_vec();
            plus[vi].1[ei] += eps;
            let mut minus = inputs.to_vec();
            minus[vi].1[ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
