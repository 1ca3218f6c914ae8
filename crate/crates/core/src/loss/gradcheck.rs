//! Central-difference verification of analytic derivatives.
//!
//! An entry passes when `|analytic − numeric| / max(1, |analytic|, |numeric|)`
//! stays below the tolerance.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradcheckStatus {
    Pass,
    Fail,
    /// The point sits on a kink; no comparison was made.
    NonSmooth,
    /// The function could not be evaluated at some perturbed point.
    EvalError(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Largest value of the pass criterion, with its `(output, input)` entry.
    pub max_mixed_err: f64,
    pub worst: Option<(usize, usize)>,
    pub status: GradcheckStatus,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.status == GradcheckStatus::Pass
    }

    pub fn non_smooth(name: impl Into<String>, inputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            max_mixed_err: 0.0,
            worst: None,
            status: GradcheckStatus::NonSmooth,
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match &self.status {
            GradcheckStatus::Pass => "pass".to_string(),
            GradcheckStatus::Fail => "FAIL".to_string(),
            GradcheckStatus::NonSmooth => "non-smooth".to_string(),
            GradcheckStatus::EvalError(e) => format!("eval error: {e}"),
        };
        write!(
            f,
            "{}: {status} ({} in, {} out, max abs {:.2e}, max rel {:.2e})",
            self.name, self.inputs, self.outputs, self.max_abs_err, self.max_rel_err
        )
    }
}

/// Compares `analytic` (outputs × inputs) with central differences of `f` at `x`.
pub fn gradcheck_jacobian<F>(
    name: impl Into<String>,
    f: F,
    x: &[f64],
    analytic: &DMatrix<f64>,
    cfg: &GradcheckConfig,
) -> GradcheckReport
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut report = GradcheckReport {
        name: name.into(),
        inputs: x.len(),
        outputs: analytic.nrows(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        max_mixed_err: 0.0,
        worst: None,
        status: GradcheckStatus::Pass,
    };
    if analytic.ncols() != x.len() {
        report.status = GradcheckStatus::EvalError(format!(
            "analytic Jacobian has {} columns for {} inputs",
            analytic.ncols(),
            x.len()
        ));
        return report;
    }
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + cfg.step;
        let plus = f(&probe);
        probe[j] = x[j] - cfg.step;
        let minus = f(&probe);
        probe[j] = x[j];
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                report.status = GradcheckStatus::EvalError(format!("input {j}: {e}"));
                return report;
            }
        };
        if plus.len() != analytic.nrows() || minus.len() != analytic.nrows() {
            report.status = GradcheckStatus::EvalError("output length changed".into());
            return report;
        }
        for i in 0..analytic.nrows() {
            let num = (plus[i] - minus[i]) / (2.0 * cfg.step);
            let an = analytic[(i, j)];
            let abs = (an - num).abs();
            let scale = an.abs().max(num.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            let mixed = abs / scale.max(1.0);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            if !(mixed <= report.max_mixed_err) {
                report.max_mixed_err = mixed;
                report.worst = Some((i, j));
            }
        }
    }
    if !(report.max_mixed_err < cfg.tol) {
        report.status = GradcheckStatus::Fail;
    }
    report
}

/// Scalar-valued variant of [`gradcheck_jacobian`].
pub fn gradcheck<F>(name: impl Into<String>, f: F, x: &[f64], grad: &[f64], cfg: &GradcheckConfig) -> GradcheckReport
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let jac = DMatrix::from_row_slice(1, grad.len(), grad);
    gradcheck_jacobian(name, |p| f(p).map(|v| vec![v]), x, &jac, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn correct_gradient_passes_and_wrong_fails() {
        let f = |x: &[f64]| Ok(x[0].sin() * x[1] + x[1].powi(3));
        let x = [0.3f64, -1.2];
        let good = [x[0].cos() * x[1], x[0].sin() + 3.0 * x[1] * x[1]];
        let r = gradcheck("poly", f, &x, &good, &GradcheckConfig::default());
        assert!(r.passed(), "{r}");
        let bad = [good[0], good[1] + 1e-3];
        let r = gradcheck("poly", f, &x, &bad, &GradcheckConfig::default());
        assert_eq!(r.status, GradcheckStatus::Fail);
        assert_eq!(r.worst, Some((0, 1)));
    }

    #[test]
    fn evaluation_failure_is_reported() {
        let f = |x: &[f64]| {
            if x[0] > 0.0 {
                Err(Error::Numeric("boom".into()))
            } else {
                Ok(x[0])
            }
        };
        let r = gradcheck("edge", f, &[0.0], &[1.0], &GradcheckConfig::default());
        assert!(matches!(r.status, GradcheckStatus::EvalError(_)));
    }
}
