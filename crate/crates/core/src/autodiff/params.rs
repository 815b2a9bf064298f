use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::BatchStats;
use super::{Array, Gradients, Graph, Var};
use crate::error::{Error, Result};

/// BatchNorm epsilon shared by every normalization layer.
pub const BN_EPS: f64 = 1e-5;

/// Named learnable tensors plus non-learnable buffers (running statistics).
///
/// Entries are kept in sorted order so iteration, serialization and
/// optimizer updates are deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Array::zeros(IxDyn(shape)));
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Array::from_elem(IxDyn(shape), value));
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Array::from_shape_vec(IxDyn(shape), data).expect("sized"));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) {
        self.buffers.insert(name.into(), value);
    }

    /// Register the affine terms and running statistics of a normalization
    /// layer with `channels` features under `prefix`.
    pub fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.fill(&format!("{prefix}.gamma"), &[channels], 1.0);
        self.zeros(&format!("{prefix}.beta"), &[channels]);
        self.set_buffer(format!("{prefix}.running_mean"), vec![0.0; channels]);
        self.set_buffer(format!("{prefix}.running_var"), vec![1.0; channels]);
    }

    /// Exponential moving update of running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f64) {
        for (prefix, stats) in updates {
            for (key, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                if let Some(run) = self.buffers.get_mut(&format!("{prefix}.{key}")) {
                    for (r, b) in run.iter_mut().zip(batch) {
                        *r = (1.0 - momentum) * *r + momentum * b;
                    }
                }
            }
        }
    }

    /// Shape-by-name summary used for compatibility checks.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward evaluation.
///
/// Each parameter is materialized as a single graph leaf no matter how many
/// layers read it, so tied weights receive the sum of their uses' gradients.
pub struct Binder<'a> {
    pub graph: &'a Graph,
    store: &'a ParamStore,
    train: bool,
    bound: RefCell<BTreeMap<String, Var>>,
    bn_updates: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, train: bool) -> Self {
        Self {
            graph,
            store,
            train,
            bound: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::param(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.graph.variable(value);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Batch normalization using the layer registered under `prefix`.
    pub fn batch_norm(&self, prefix: &str, x: Var, axis: usize) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.train {
            let (y, stats) = self.graph.batch_norm(x, gamma, beta, axis, BN_EPS, None)?;
            if let Some(stats) = stats {
                self.bn_updates.borrow_mut().push((prefix.to_string(), stats));
            }
            Ok(y)
        } else {
            let missing = || Error::param(format!("missing running statistics for `{prefix}`"));
            let mean = self
                .store
                .buffer(&format!("{prefix}.running_mean"))
                .ok_or_else(missing)?;
            let var = self
                .store
                .buffer(&format!("{prefix}.running_var"))
                .ok_or_else(missing)?;
            let (y, _) = self
                .graph
                .batch_norm(x, gamma, beta, axis, BN_EPS, Some((mean, var)))?;
            Ok(y)
        }
    }

    /// Gradients for every bound parameter; parameters that were bound but
    /// unreachable from the root get zeros.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, &v)| {
                let shape = self.graph.shape(v);
                (name.clone(), grads.get_or_zeros(v, &shape))
            })
            .collect()
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(param.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(param.raw_dim()));
            ndarray::Zip::from(&mut *param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
    }
}
