//! Central finite differences for checking reverse-mode gradients.
//!
//! Everything here evaluates forward passes only, so it stays independent of
//! the backward rules it is used to verify.

use crate::params::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Pass criterion: relative error within `rel` or absolute error within
/// `abs`, whichever is looser.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const fn new(rel: f64, abs: f64) -> Self {
        Tolerance { rel, abs }
    }

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= self.abs || diff <= self.rel * analytic.abs().max(numeric.abs())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64, tol: Tolerance) {
        self.checked += 1;
        if !tol.accepts(analytic, numeric) {
            self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
            self.failures.push(Mismatch {
                index,
                analytic,
                numeric,
            });
        } else if (analytic - numeric).abs() > tol.abs {
            self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares a full analytic gradient against central differences of `f` at `x`.
pub fn check_vector(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tol: Tolerance,
) -> Report {
    let numeric = central_difference(f, x, step);
    let mut report = Report::default();
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        report.record(i, a, n, tol);
    }
    report
}

/// Checks the gradients held in `store` for `ids` against central differences
/// of `loss`, perturbing at most `max_coords` evenly spaced coordinates of each
/// parameter (all of them when the parameter is small enough).
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    step: f64,
    tol: Tolerance,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Report {
    let mut probe = store.clone();
    let mut report = Report::default();
    for &id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            report.record(i, store.grad(id)[i], (up - down) / (2.0 * step), tol);
        }
    }
    report
}
