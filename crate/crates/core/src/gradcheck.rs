//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Gradients;

/// Result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss_fn`.
///
/// `stride` checks every `stride`-th coordinate of every tensor (1 = all).
/// Fails with the offending coordinate when the error exceeds `tolerance`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ModelParams,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for name in names {
        let entry = analytic.lookup(&name, params)?;
        let grad = entry.grad.as_standard_layout();
        let grad = grad.as_slice().expect("standard layout");
        let len = grad.len();
        for flat in (0..len).step_by(stride.max(1)) {
            let original = {
                let t = probe.get_mut(&name).expect("cloned from params");
                let slot = t.as_slice_mut().expect("standard layout")[flat];
                t.as_slice_mut().expect("standard layout")[flat] = slot + step;
                slot
            };
            let plus = loss_fn(&probe)?;
            probe.get_mut(&name).expect("present").as_slice_mut().expect("layout")[flat] =
                original - step;
            let minus = loss_fn(&probe)?;
            probe.get_mut(&name).expect("present").as_slice_mut().expect("layout")[flat] =
                original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad[flat];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), flat));
            }
        }
    }
    if report.max_rel_error > tolerance {
        let (name, idx) = report.worst.clone().unwrap_or_default();
        return Err(Error::Numeric(format!(
            "gradient check failed at {name}[{idx}]: relative error {:.3e} > {tolerance:.1e}",
            report.max_rel_error
        )));
    }
    Ok(report)
}
