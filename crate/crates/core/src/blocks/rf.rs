//! Radar branch: temporal-difference selective blocks, channel attention and
//! the alignment modules that bring the RF rate down to the token rate.

use rand::Rng;

use super::diff::{temporal_diff, Boundary};
use crate::autodiff::{Binder, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ssm::{selective_block, GateActivation, SelectiveBlockParams};

fn conv1d_init(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut impl Rng) {
    let fan_in: usize = shape[1..].iter().product();
    store.uniform(name, shape, (6.0 / fan_in as f64).sqrt(), rng);
}

/// Difference stack → 7-tap conv → BN → selective block, `blocks` times.
#[derive(Debug, Clone, PartialEq)]
pub struct Tdmm {
    pub prefix: String,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub state_size: usize,
    pub gate: GateActivation,
    pub boundary: Boundary,
}

impl Tdmm {
    pub fn new(prefix: impl Into<String>, channels: usize, blocks: usize, state_size: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            blocks,
            kernel: 7,
            state_size,
            gate: GateActivation::Sigmoid,
            boundary: Boundary::Clamp,
        }
    }

    fn name(&self, i: usize, leaf: &str) -> String {
        format!("{}.{i}.{leaf}", self.prefix)
    }

    pub fn selective(&self, i: usize) -> SelectiveBlockParams {
        SelectiveBlockParams::new(self.name(i, "ssm"), self.channels, self.state_size).with_gate(self.gate)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 {
            return Err(Error::param("difference module needs at least one block and one channel"));
        }
        let c = self.channels;
        for i in 0..self.blocks {
            let ci = if i == 0 { 4 * c } else { c };
            conv1d_init(store, &self.name(i, "conv.w"), &[c, ci, self.kernel], rng);
            store.batch_norm(&self.name(i, "bn"), c);
            self.selective(i).init(store, rng)?;
        }
        Ok(())
    }
}

/// `[B, C, T]` → `[B, C, T]`. The first block reads the four difference maps
/// of the input; every later block reads its predecessor's output.
pub fn tdmm_forward(b: &Binder, x: Var, p: &Tdmm) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != p.channels {
        return Err(Error::shape(format!(
            "expected [B, {}, T] radar features, got {shape:?}",
            p.channels
        )));
    }
    let pad = p.kernel / 2;
    let mut h = temporal_diff(g, x, 2, 1, p.boundary)?;
    for i in 0..p.blocks {
        let y = g.conv1d(h, b.param(&p.name(i, "conv.w"))?, pad, p.kernel - 1 - pad, 1)?;
        let y = b.batch_norm(&p.name(i, "bn"), y, 1)?;
        h = selective_block(b, y, &p.selective(i))?;
    }
    Ok(h)
}

/// Shared two-layer projection applied to average- and max-pooled channel
/// summaries; reduction ratio 4.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            reduction: 4,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (c, r) = (self.channels, self.hidden());
        store.uniform(&self.name("fc1.w"), &[c, r], 1.0 / (c as f64).sqrt(), rng);
        store.zeros(&self.name("fc1.b"), &[r]);
        store.uniform(&self.name("fc2.w"), &[r, c], 1.0 / (r as f64).sqrt(), rng);
        store.zeros(&self.name("fc2.b"), &[c]);
    }
}

/// Per-channel weights in (0, 1) for `x: [B, C, T]`, shaped `[B, C, 1]`.
pub fn channel_attention(b: &Binder, x: Var, p: &ChannelAttention) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != p.channels {
        return Err(Error::shape(format!(
            "attention over {} channels got {shape:?}",
            p.channels
        )));
    }
    let (bsz, c) = (shape[0], shape[1]);
    let mlp = |v: Var| -> Result<Var> {
        let h = g.linear(v, b.param(&p.name("fc1.w"))?, Some(b.param(&p.name("fc1.b"))?))?;
        g.linear(g.relu(h), b.param(&p.name("fc2.w"))?, Some(b.param(&p.name("fc2.b"))?))
    };
    let avg = g.reshape(g.mean_axes_keep(x, &[2])?, &[bsz, c])?;
    let max = g.max_axis(x, 2)?;
    let logits = g.add(mlp(avg)?, mlp(max)?)?;
    g.reshape(g.sigmoid(logits), &[bsz, c, 1])
}

/// conv → BN → channel attention → ×½ temporal average pooling → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Rfam {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Rfam {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            kernel: 3,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn attention(&self) -> ChannelAttention {
        ChannelAttention::new(self.name("attn"), self.out_channels)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        conv1d_init(store, &self.name("conv.w"), &[self.out_channels, self.in_channels, self.kernel], rng);
        store.batch_norm(&self.name("bn"), self.out_channels);
        self.attention().init(store, rng);
    }
}

/// `[B, Ci, T]` → `[B, Co, T/2]`, non-negative.
pub fn rfam_forward(b: &Binder, x: Var, p: &Rfam) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != p.in_channels {
        return Err(Error::shape(format!(
            "expected [B, {}, T] features, got {shape:?}",
            p.in_channels
        )));
    }
    if shape[2] % 2 != 0 {
        return Err(Error::input(format!(
            "alignment halving needs an even length, got {}",
            shape[2]
        )));
    }
    let pad = p.kernel / 2;
    let y = g.conv1d(x, b.param(&p.name("conv.w"))?, pad, p.kernel - 1 - pad, 1)?;
    let y = b.batch_norm(&p.name("bn"), y, 1)?;
    let w = channel_attention(b, y, &p.attention())?;
    let y = g.mul(y, w)?;
    let y = g.avg_pool_axis(y, 2, 2)?;
    Ok(g.relu(y))
}
