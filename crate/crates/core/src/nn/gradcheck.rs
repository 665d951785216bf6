//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements_per_param: Option<usize>,
    /// Gradients smaller than this are compared in absolute terms (e.g. the
    /// key bias of attention, whose exact gradient is zero).
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements_per_param: None,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, abs_floor)` over checked elements.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares backward-pass gradients of `loss` against central differences for
/// every trainable parameter in `store`. The loss is evaluated on inference
/// graphs, so it must be deterministic.
pub fn grad_check(
    store: &ParamStore<f64>,
    loss: impl Fn(&mut Graph<'_, f64>) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut work = store.clone();
    let mut params = Vec::new();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.value.len()))
        .collect();
    for (id, name, n) in ids {
        let indices: Vec<usize> = match opts.max_elements_per_param {
            Some(m) if n > m => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut max_a = 0.0f64;
        let mut max_n = 0.0f64;
        for &i in &indices {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i].f64());
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        let rel_error = max_diff / max_a.max(max_n).max(opts.abs_floor);
        params.push(ParamCheck {
            name,
            checked: indices.len(),
            rel_error,
        });
    }
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}
