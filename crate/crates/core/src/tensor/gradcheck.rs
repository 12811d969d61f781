use super::Tensor;

/// Result of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Denominator floor for the relative error; below it the check degrades to an
/// absolute error scaled by `1 / ABS_FLOOR`.
pub const ABS_FLOOR: f64 = 1e-4;

/// Compare the analytic gradient returned by `f` with five-point central
/// differences (fourth order) at `point`. The error per coordinate is `|analytic - numeric| / max(|numeric|, 1e-4)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> GradCheck
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    finite_diff_check_masked(f, point, eps, |_| true)
}

/// Same as [`finite_diff_check`], restricted to coordinates where `include`
/// holds (used to skip points near relu/maxpool kinks).
pub fn finite_diff_check_masked<F, P>(f: F, point: &Tensor, eps: f64, include: P) -> GradCheck
where
    F: Fn(&Tensor) -> (f64, Tensor),
    P: Fn(usize) -> bool,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must be in (0, 1e-2]");
    let (_, analytic) = f(point);
    assert_eq!(analytic.shape(), point.shape(), "gradient shape");
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        if !include(i) {
            continue;
        }
        let x0 = point.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = x0 + d;
            f(&probe).0
        };
        let (f2, f1, m1, m2) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        probe.data_mut()[i] = x0;
        let numeric = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / numeric.abs().max(ABS_FLOOR);
        report.checked += 1;
        if report.checked == 1 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
