//! Central finite-difference gradient checking.
//!
//! Relative error per coordinate is
//! `|analytic − numeric| / max(1, |analytic|, |numeric|)`; the checks report
//! the maximum over all coordinates. Both routines switch the thread to
//! 64-bit mode for their duration.

use super::{no_grad, Precision, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn finite_scalar(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Checks the gradient of `f` with respect to `x`. `x` is copied into a
/// fresh 64-bit leaf so the caller's tensor is left untouched.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let _mode = Precision::F64.scoped();
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    grad_check_inputs(|| f(&leaf), &[leaf.clone()], eps)
}

/// Checks the gradient of the closure's scalar output with respect to each
/// of `inputs`, which must be gradient-requiring leaves. Inputs are perturbed
/// in place and restored afterwards.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let _mode = Precision::F64.scoped();
    for x in inputs {
        if !x.requires_grad() || !x.is_leaf() {
            return Err(Error::Contract(
                "gradient check inputs must be gradient-requiring leaves".into(),
            ));
        }
        x.zero_grad();
    }
    let loss = f()?;
    finite_scalar(&loss)?;
    loss.backward()?;
    drop(loss);

    let mut worst: f64 = 0.0;
    for x in inputs {
        let analytic = x.grad().expect("zeroed above");
        for (i, &a) in analytic.iter().enumerate() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let plus = no_grad(&f).and_then(|t| finite_scalar(&t));
            x.data_mut()[i] = orig - eps;
            let minus = no_grad(&f).and_then(|t| finite_scalar(&t));
            x.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
        x.clear_grad();
    }
    Ok(worst)
}
