//! Central finite-difference gradient checking.
//!
//! The numeric side only re-runs forward passes, so it stays independent of
//! every backward rule it is used to verify.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};

use super::{Graph, NodeId};

/// Default step for central differences in f64.
pub const STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the analytic gradient of `loss` with central differences for
/// every trainable scalar of `store` (or only `only` when given).
pub fn check<F>(store: &mut ParamStore<f64>, only: Option<&[ParamId]>, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    g.backward(root, store)?;

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().filter(|&id| store.get(id).requires_grad()).collect(),
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(&mut g, s)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in ids {
        let analytic = store.get(id).grad().expect("trainable").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
