use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Loss value and its partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllGrad<T> {
    pub loss: T,
    pub d_mean: T,
    /// Zero whenever `log_std` sits outside the clamp range.
    pub d_log_std: T,
}

/// Negative log-likelihood of `target` under N(mean, exp(log_std)^2), with
/// `log_std` clamped to [`LOG_STD_MIN`], [`LOG_STD_MAX`].
pub fn gaussian_nll<T: Scalar>(mean: T, log_std: T, target: T) -> Result<T> {
    Ok(gaussian_nll_grad(mean, log_std, target)?.loss)
}

pub fn gaussian_nll_grad<T: Scalar>(mean: T, log_std: T, target: T) -> Result<NllGrad<T>> {
    if !(mean.is_finite() && log_std.is_finite() && target.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gaussian_nll(mean={mean}, log_std={log_std}, target={target})"
        )));
    }
    let (lo, hi) = (T::of(LOG_STD_MIN), T::of(LOG_STD_MAX));
    let clamped = log_std.max(lo).min(hi);
    let inv_var = (-(clamped + clamped)).exp();
    let residual = target - mean;
    let half = T::of(0.5);
    let loss = half * residual * residual * inv_var + clamped + T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let d_log_std = if log_std < lo || log_std > hi {
        T::zero()
    } else {
        T::one() - residual * residual * inv_var
    };
    Ok(NllGrad {
        loss,
        d_mean: -residual * inv_var,
        d_log_std,
    })
}
