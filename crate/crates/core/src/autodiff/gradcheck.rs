//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{backward, Tensor};
use crate::params::ParamSet;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare the analytic gradient of `f` at `at` with central differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε`, one coordinate at a time.
pub fn finite_difference_check<F>(f: F, at: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let vars = at.to_vars();
    let root = f(&vars)?;
    let grads = backward(&root, &vars, false)?;
    let base = at.detached();

    let eval = |name: &str, index: usize, value: f64| -> Result<f64> {
        let orig = base.get(name)?;
        let mut data = orig.to_vec();
        data[index] = value;
        let probe = base.with_replaced(&[(name.to_string(), Tensor::constant(orig.shape(), data)?)])?;
        // Probes are leaves too, so objectives that differentiate internally
        // (inner gradient steps) see the same function as the analytic pass.
        let v = f(&probe.to_vars())?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective at {name}[{index}] = {v}")));
        }
        Ok(v)
    };

    let mut rows = Vec::with_capacity(at.len());
    for entry in base.iter() {
        let analytic = grads.get_or_zeros(&entry.name, entry.tensor.shape());
        let mut row = GradCheckRow {
            name: entry.name.clone(),
            numel: entry.tensor.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for (i, &x) in entry.tensor.data().iter().enumerate() {
            let numeric = (eval(&entry.name, i, x + step)? - eval(&entry.name, i, x - step)?) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            row.max_abs_err = row.max_abs_err.max((a - numeric).abs());
            if rel > row.max_rel_err {
                row.max_rel_err = rel;
                row.worst_index = i;
            }
        }
        rows.push(row);
    }
    let max_rel_err = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { rows, max_rel_err })
}
