//! Log-space arithmetic shared by every inference routine.
//!
//! The additive identity of the log semiring is `f64::NEG_INFINITY`. All
//! reductions shift by the maximum before exponentiating, and an input with
//! no finite mass never produces NaN.

use crate::error::{Error, Result};

/// A log-domain score or log-probability.
pub type LogScore = f64;

/// The log-semiring zero.
pub const LOG_ZERO: LogScore = f64::NEG_INFINITY;

/// `log(exp(a) + exp(b))` without overflow. Two semiring zeros give a zero.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Max-shifted log-sum-exp for internal use; returns `LOG_ZERO` when every
/// entry is `LOG_ZERO` (and for an empty iterator).
#[inline]
pub(crate) fn lse<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = values.clone().into_iter().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn check_not_nan(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Usage("NaN in log-space input".into()));
    }
    Ok(())
}

/// `log Σ exp(vᵢ)`.
///
/// Entries equal to negative infinity contribute nothing; if every entry is
/// negative infinity the result is the semiring zero itself.
pub fn log_sum_exp(values: &[LogScore]) -> Result<LogScore> {
    if values.is_empty() {
        return Err(Error::Usage("log_sum_exp of an empty sequence".into()));
    }
    check_not_nan(values)?;
    Ok(lse(values.iter().copied()))
}

/// Normalizes `values` into log-probabilities.
pub fn log_softmax(values: &[LogScore]) -> Result<Vec<LogScore>> {
    if values.is_empty() {
        return Err(Error::Usage("log_softmax of an empty sequence".into()));
    }
    check_not_nan(values)?;
    let z = lse(values.iter().copied());
    if !z.is_finite() {
        return Err(Error::Degenerate(
            "log_softmax input has no finite entry".into(),
        ));
    }
    Ok(values.iter().map(|&v| v - z).collect())
}

/// Normalizes `values` into probabilities (exponentiated [`log_softmax`]).
pub fn softmax(values: &[LogScore]) -> Result<Vec<f64>> {
    Ok(log_softmax(values)?.into_iter().map(f64::exp).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
