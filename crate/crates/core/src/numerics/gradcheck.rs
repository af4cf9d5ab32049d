/// Central-difference step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`; non-finite inputs count as
/// an infinite error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, one coordinate at a time.
pub fn finite_diff_check<F>(params: &[f64], analytic: &[f64], step: f64, mut loss: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: analytic.first().copied().unwrap_or(0.0),
        worst_numeric: 0.0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = loss(&theta);
        theta[i] = orig - step;
        let minus = loss(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || (err.is_nan() && !report.max_rel_error.is_nan()) {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = finite_diff_check(&[3.0], &[6.0], FD_STEP, |t| t[0] * t[0]);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let r = finite_diff_check(&[1.0, -2.0], &[0.0, 0.0], FD_STEP, |_| 4.2);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let r = finite_diff_check(&[1.0, 2.0], &[2.0, 5.0], FD_STEP, |t| t[0] * t[0] + t[1] * t[1]);
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_counts_as_failure() {
        let r = finite_diff_check(&[1.0], &[1.0], FD_STEP, |_| f64::NAN);
        assert!(!r.passes(1e-4));
    }
}
