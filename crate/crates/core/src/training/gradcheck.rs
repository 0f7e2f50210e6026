//! Central finite-difference verification of analytic gradients.

use crate::autograd::Graph;
use crate::error::Result;
use crate::params::ParamId;

use super::{loss_and_grads, loss_graph, LossTerm, Model, TrainConfig, TrainingSample};

/// Step of the central differences.
pub const FD_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a − n| / max(1, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Compares analytic and numeric gradients of the `terms` objective on
/// `sample`, holding stop-gradient values fixed. `params` restricts the check (all parameters when `None`);
/// at most `max_coords` evenly spaced coordinates are probed per tensor.
pub fn gradient_check(
    model: &Model,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    terms: &[LossTerm],
    params: Option<&[ParamId]>,
    max_coords: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, sample, cfg, terms, None)?;
    // Stop-gradient targets stay at their values for the unperturbed model.
    let mut base = Graph::new();
    loss_graph(model, &mut base, sample, cfg, terms)?;
    let stopped = base.stopped_values().to_vec();
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => model.store.ids().collect(),
    };
    let mut probe = model.clone();
    let eval = |probe: &Model| -> Result<f64> {
        let mut g = Graph::replaying(stopped.clone());
        Ok(loss_graph(probe, &mut g, sample, cfg, terms)?.1.total)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for id in ids {
        let analytic = grads.iter().find(|(g, _)| *g == id).map(|(_, m)| m.clone());
        let len = model.store.value(id).len();
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        for j in (0..len).step_by(stride) {
            let original = model.store.value(id).as_slice()[j];
            probe.store.value_mut(id).as_mut_slice()[j] = original + FD_EPS;
            let up = eval(&probe)?;
            probe.store.value_mut(id).as_mut_slice()[j] = original - FD_EPS;
            let down = eval(&probe)?;
            probe.store.value_mut(id).as_mut_slice()[j] = original;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic.as_ref().map_or(0.0, |m| m.as_slice()[j]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((model.store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
