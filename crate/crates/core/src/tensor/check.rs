use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Central finite-difference gradient estimate of a scalar-valued function:
/// `(f(x + h e_i) - f(x - h e_i)) / (2 h)` per coordinate. Independent of the
/// tape; used as the oracle for backward().
pub fn finite_diff_gradient<T: Scalar>(
    f: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    if h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let step = T::from_float(h);
    let two_h = T::from_float(2.0 * h);
    let mut grad = vec![T::zero(); x.len()];
    for i in 0..x.len() {
        let plus = f(&x.with_nudged(i, step))?.item()?;
        let minus = f(&x.with_nudged(i, -step))?.item()?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "finite_diff_gradient: non-finite probe at coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / two_h;
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}
