//! Central finite-difference gradient checking.

use std::fmt;

/// Denominator floor for relative error, so that gradients that are
/// analytically ~0 are compared absolutely at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        GradCheckReport {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        }
    }

    pub fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some(Mismatch {
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} entries, max rel err {:.3e}",
            self.name, self.checked, self.max_rel_err
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " (index {}: analytic {:.6e}, numeric {:.6e})",
                w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for a scalar function of one perturbation.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, step: f64) -> f64 {
    (eval(step) - eval(-step)) / (2.0 * step)
}

/// Compares `analytic[i]` against the central difference of
/// `eval(i, delta)` (the loss with element `i` shifted by `delta`) for each
/// listed index.
pub fn check_indices(
    name: impl Into<String>,
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut eval: impl FnMut(usize, f64) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::new(name);
    for &i in indices {
        let numeric = central_difference(|d| eval(i, d), step);
        report.record(i, analytic[i], numeric);
    }
    report
}
