use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Absolute difference below which two gradients are considered equal.
pub const ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_TOL {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    Ok(g.value(loss).item())
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences `(f(p+h) - f(p-h)) / 2h` at `probe_count` randomly
/// chosen coordinates across all parameters of `store`.
///
/// `f` must be deterministic in the parameters (eval-mode batch norm, fixed
/// data). The store's gradients are overwritten.
pub fn finite_diff_check<F, R>(
    f: F,
    store: &mut ParamStore,
    probe_count: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
    R: Rng + ?Sized,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    let picks: Vec<(ParamId, usize)> = if coords.len() <= probe_count {
        coords
    } else {
        rand::seq::index::sample(rng, coords.len(), probe_count)
            .into_iter()
            .map(|k| coords[k])
            .collect()
    };

    let mut probes = Vec::with_capacity(picks.len());
    for (id, index) in picks {
        let original = store.value(id).data()[index];
        store.value_mut(id).data_mut()[index] = original + h;
        let plus = evaluate(&f, store)?;
        store.value_mut(id).data_mut()[index] = original - h;
        let minus = evaluate(&f, store)?;
        store.value_mut(id).data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = store.grad(id)[index];
        probes.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { probes })
}
