//! Central finite-difference verification of backward gradients.

use super::{ParamStore, Tape, TensorId};
use crate::error::Result;

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative-error tolerance used throughout the crate's checks.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// |a-b| / max(|a|, |b|, 0.02). The floor turns comparisons of small
/// gradients into absolute ones: central differences through a deep graph
/// carry ~1e-6 of roundoff at eps = 1e-5 (thousands of accumulated f64
/// roundings divided by 2·eps), so below the floor only an absolute bound
/// of 2e-6 is meaningful at the 1e-4 tolerance.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.02)
}

/// Checks backward gradients of `loss_fn` against central finite
/// differences for every coordinate of every parameter in `store`
/// (or `max_coords_per_param` evenly spaced coordinates when given).
///
/// `loss_fn` must rebuild the forward pass from scratch on the tape it is
/// given and return a scalar node.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    eps: f64,
    max_coords_per_param: Option<usize>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<TensorId>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| p.value.grad.clone().expect("populated by backward"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    let n_params = store.len();
    for pi in 0..n_params {
        let n = store.get(super::ParamId(pi)).value.len();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if k < n => {
                let stride = n.div_ceil(k);
                (0..n).step_by(stride).collect()
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = store.get(super::ParamId(pi)).value.data[ci];

            store.get_mut(super::ParamId(pi)).value.data[ci] = orig + eps;
            let mut t = Tape::new();
            let l = loss_fn(&mut t, store)?;
            let f_plus = t.data(l)[0];

            store.get_mut(super::ParamId(pi)).value.data[ci] = orig - eps;
            let mut t = Tape::new();
            let l = loss_fn(&mut t, store)?;
            let f_minus = t.data(l)[0];

            store.get_mut(super::ParamId(pi)).value.data[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = store.get(super::ParamId(pi)).name.clone();
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
