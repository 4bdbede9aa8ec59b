use super::{ParamStore, Tape, Var};
use crate::error::{contract_err, Result};

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`,
    /// so coordinates whose true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter tensor (evenly
    /// spaced). `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdWorst {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub worst: Option<FdWorst>,
    /// Largest relative error per parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} (tol {:.0e}) {}",
            self.coords_checked,
            self.max_rel_err,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{}]: analytic {:.6e} vs numeric {:.6e}",
                w.param, w.coord, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p+h) - f(p-h)) / 2h` for every parameter coordinate in `store`.
///
/// `f` must build its scalar loss on the given tape, reading parameters from
/// the given store. It is evaluated twice at the base point first; if the two
/// values differ the function is not deterministic and the check refuses to run.
pub fn finite_difference_check<F>(f: F, store: &ParamStore, cfg: &FdConfig) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(cfg.h > 0.0) {
        return Err(contract_err!("finite-difference step must be positive"));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let loss = f(&tape, s)?;
        tape.check_finite()?;
        Ok(loss.item())
    };

    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let base = loss.item();
    let analytic = tape.backward(loss, store)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(contract_err!(
            "function is not deterministic: {base:e} then {again:e}"
        ));
    }

    let mut work = store.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        tol: cfg.tol,
        worst: None,
        per_param: Vec::with_capacity(store.len()),
    };
    for (id, name, value) in store.iter() {
        let n = value.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst_here = 0.0f64;
        for c in coords {
            let orig = value.data()[c];
            work.get_mut(id).data_mut()[c] = orig + cfg.h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - cfg.h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.get(id).data()[c];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(FdWorst {
                    param: name.to_string(),
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.per_param.push((name.to_string(), worst_here));
    }
    Ok(report)
}
