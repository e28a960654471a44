//! Central finite-difference check of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Default perturbation for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-3;

/// Magnitudes below this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar built by `build` against
/// central differences for every element of the selected parameters
/// (all parameters when `only` is `None`).
pub fn grad_check<F>(params: &mut ParamStore, only: Option<&[ParamId]>, step: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.iter().map(|(id, _)| id).collect(),
    };
    let mut eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for id in ids {
        let n = params.get(id).len();
        for k in 0..n {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}
