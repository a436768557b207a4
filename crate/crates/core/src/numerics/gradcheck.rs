//! Central finite-difference oracle for autodiff gradients.

use crate::error::{Error, Result};

/// Outcome of comparing autodiff against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-12)` over the checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares `analytic[i]` with `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every `i`
/// in `coords` (all coordinates when `None`). `params` is restored on return.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &mut [f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    h: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("{} analytic entries for {} params", analytic.len(), params.len()),
        ));
    }
    if h <= 0.0 {
        return Err(Error::invalid("finite_difference_check", format!("step {h} must be positive")));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut report =
        FdReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0, tolerance };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::invalid("finite_difference_check", format!("coordinate {i} out of range")));
        }
        let orig = params[i];
        params[i] = orig + h;
        let plus = f(params);
        params[i] = orig - h;
        let minus = f(params);
        params[i] = orig;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_difference() {
        let mut p = [3.0];
        let rep = finite_difference_check(|x| Ok(x[0] * x[0]), &mut p, &[6.0], None, 1e-3, 1e-9).unwrap();
        assert!((rep.numeric - 6.0).abs() < 1e-6);
        assert!(rep.passed());
        assert_eq!(p, [3.0]);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut p = [1.0, 2.0];
        let rep = finite_difference_check(|x| Ok(x[0] * x[1]), &mut p, &[2.0, 1.5], None, 1e-5, 1e-6).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.worst_index, 1);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut p = [0.0];
        let r = finite_difference_check(|x| Ok((x[0]).ln()), &mut p, &[1.0], None, 1e-3, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
