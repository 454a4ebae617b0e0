//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Step used for central differences unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the gradient returned by `f` at `params` against central
/// differences of its value.
///
/// `f` returns the scalar value and its analytic gradient (same length as
/// the parameter slice).
pub fn finite_diff_check<F>(mut f: F, params: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Validation(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let (plus, _) = f(&probe)?;
        probe[i] = params[i] - step;
        let (minus, _) = f(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around parameter {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst.max_rel_error || !err.is_finite() {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn square_has_no_error() {
        let r = finite_diff_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], DEFAULT_STEP)
            .unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        // analytic 12 against numeric 6: |12 - 6| / max(1, 6) = 1
        let r = finite_diff_check(|x| Ok((x[0] * x[0], vec![4.0 * x[0]])), &[3.0], DEFAULT_STEP)
            .unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-6);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn halved_gradient_error_is_one_half() {
        let r = finite_diff_check(|x| Ok((x[0] * x[0], vec![x[0]])), &[3.0], DEFAULT_STEP).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let r = finite_diff_check(|x| Ok((libm::log(x[0]), vec![1.0 / x[0]])), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
