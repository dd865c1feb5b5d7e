use thiserror::Error;

use super::{Tape, Tensor, Var};
use crate::error::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function evaluation failed: {0}")]
    Eval(#[from] Error),
    #[error("analytic gradient is NaN at coordinate {0}")]
    NanAnalytic(usize),
    #[error("finite-difference estimate is NaN at coordinate {0}")]
    NanNumeric(usize),
}

/// Compares the tape gradient of a scalar function against central finite
/// differences. Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64, GradCheckError>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> crate::Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone(), true);
        let loss = f(&tape, x)?;
        tape.backward(loss)?.get_or_zeros(x)
    };
    let eval = |p: Tensor<f64>| -> Result<f64, GradCheckError> {
        let tape = Tape::new();
        let x = tape.leaf(p, false);
        let loss = f(&tape, x)?;
        let v = loss.value();
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let a = analytic.data()[i];
        if a.is_nan() {
            return Err(GradCheckError::NanAnalytic(i));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if fd.is_nan() {
            return Err(GradCheckError::NanNumeric(i));
        }
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
