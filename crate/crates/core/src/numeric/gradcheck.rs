//! Central-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use super::params::ParamRegistry;
use super::tape::{Mode, Tape, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of the scalar built by `loss` against
/// `(f(θ+h) - f(θ-h)) / 2h` for every entry of every parameter. The loss is
/// evaluated in eval mode so dropout is off.
pub fn grad_check<L>(params: &mut ParamRegistry<f64>, h: f64, tol: f64, mut loss: L) -> Result<GradCheckReport>
where
    L: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params, Mode::Eval, 0);
        let out = loss(&mut tape)?;
        tape.backward(out)?
    };
    let mut eval = |params: &ParamRegistry<f64>| -> Result<f64> {
        let mut tape = Tape::new(params, Mode::Eval, 0);
        let out = loss(&mut tape)?;
        Ok(tape.scalar(out))
    };
    let ids: Vec<_> = params.ids().collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let zeros = vec![0.0; n];
        let grad = analytic.get(id).unwrap_or(&zeros).to_vec();
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for i in 0..n {
            let orig = params.get(id).values()[i];
            params.get_mut(id).values_mut()[i] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).values_mut()[i] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_abs = max_abs.max((grad[i] - numeric).abs());
            max_rel = max_rel.max(relative_error(grad[i], numeric));
        }
        checks.push(ParamCheck {
            name: params.name(id).to_string(),
            entries: n,
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            passed: max_rel < tol,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        max_rel_error,
        passed: checks.iter().all(|c| c.passed),
        params: checks,
    })
}
