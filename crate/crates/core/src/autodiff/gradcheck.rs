//! Central finite-difference checks of analytic gradients.

use super::{Array, Binder, Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Magnitude below which a gradient is compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly spaced).
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64, cfg: &GradCheckConfig) {
        let rel_err = relative_error(analytic, numeric, cfg.floor);
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err);
        if rel_err > cfg.tolerance || !rel_err.is_finite() {
            self.failures.push(Mismatch {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max).collect()
}

/// Check d(loss)/d(param) for every parameter in `store` (or only the
/// `only` subset) against central differences.
///
/// `loss` builds a scalar on the supplied binder; it is re-run for every
/// perturbation, so it must be a pure function of the store.
pub fn check_params<F>(
    store: &ParamStore,
    only: Option<&[&str]>,
    train: bool,
    cfg: GradCheckConfig,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Binder) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let b = Binder::new(&g, s, train);
        let l = loss(&b)?;
        Ok(g.scalar(l))
    };
    let analytic = {
        let g = Graph::new();
        let b = Binder::new(&g, store, train);
        let l = loss(&b)?;
        let grads = g.backward(l);
        b.grads(&grads)
    };
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| only.map_or(true, |o| o.contains(n)))
        .map(str::to_string)
        .collect();
    for name in names {
        let len = store.get(&name).map_or(0, |a| a.len());
        let zeros = Array::zeros(store.get(&name).expect("listed").raw_dim());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let grad: Vec<f64> = grad.iter().copied().collect();
        for idx in sample_indices(len, cfg.max_entries) {
            let original = store.get(&name).expect("listed").iter().nth(idx).copied().unwrap_or(0.0);
            set_entry(&mut work, &name, idx, original + cfg.step);
            let up = eval(&work)?;
            set_entry(&mut work, &name, idx, original - cfg.step);
            let down = eval(&work)?;
            set_entry(&mut work, &name, idx, original);
            let numeric = (up - down) / (2.0 * cfg.step);
            report.record(&name, idx, grad[idx], numeric, &cfg);
        }
    }
    Ok(report)
}

fn set_entry(store: &mut ParamStore, name: &str, idx: usize, value: f64) {
    if let Some(a) = store.get_mut(name) {
        if let Some(slot) = a.iter_mut().nth(idx) {
            *slot = value;
        }
    }
}

/// Check d(loss)/d(input) for a function of a single array.
pub fn check_input<F>(input: &Array, cfg: GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let analytic: Vec<f64> = {
        let g = Graph::new();
        let x = g.variable(input.clone());
        let l = loss(&g, x)?;
        let grads = g.backward(l);
        grads.get_or_zeros(x, input.shape()).iter().copied().collect()
    };
    let eval = |a: &Array| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(a.clone());
        let l = loss(&g, x)?;
        Ok(g.scalar(l))
    };
    let mut report = GradCheckReport::default();
    let mut work = input.clone();
    for idx in sample_indices(input.len(), cfg.max_entries) {
        let original = input.iter().nth(idx).copied().unwrap_or(0.0);
        *work.iter_mut().nth(idx).expect("in range") = original + cfg.step;
        let up = eval(&work)?;
        *work.iter_mut().nth(idx).expect("in range") = original - cfg.step;
        let down = eval(&work)?;
        *work.iter_mut().nth(idx).expect("in range") = original;
        report.record("input", idx, analytic[idx], (up - down) / (2.0 * cfg.step), &cfg);
    }
    Ok(report)
}

/// Run several checks and fold their reports together.
pub fn combine(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    let mut out = GradCheckReport::default();
    for r in reports {
        out.merge(r);
    }
    out
}
