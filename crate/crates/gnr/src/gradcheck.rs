//! Finite-difference verification of analytic gradients.
//!
//! The caller computes analytic gradients (forward, backward, flush) so the
//! store's accumulators hold d(loss)/d(param), then hands over a forward-only
//! loss closure. The checker nudges each parameter element by ±h and compares
//! the central difference against the stored gradient. The closure must be a
//! deterministic function of the parameter values — re-seed any RNG it uses
//! on every call.

use crate::tensor::{ParameterStore, TensorError};

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative error with a floor: elements where both sides are below 1e-8 in
/// magnitude count as matching.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare the gradients stored for `names` against central finite
/// differences of `loss`, flagging every element whose relative error
/// exceeds `tol`.
pub fn check_gradients<F, E>(
    store: &mut ParameterStore,
    names: &[String],
    loss: F,
    h: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&ParameterStore) -> std::result::Result<f64, E>,
    E: From<TensorError>,
{
    let mut report = GradCheckReport::default();
    for name in names {
        let (len, analytic) = {
            let p = store.get(name)?;
            (p.values.len(), p.grad.clone())
        };
        for i in 0..len {
            let x = store.get(name)?.values[i];
            store.get_mut(name)?.values[i] = x + h;
            let plus = loss(store)?;
            store.get_mut(name)?.values[i] = x - h;
            let minus = loss(store)?;
            store.get_mut(name)?.values[i] = x;

            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[i], numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > tol {
                report.mismatches.push(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
