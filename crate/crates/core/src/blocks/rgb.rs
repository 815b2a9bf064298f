//! Video branch: difference/raw stem fusion and the masked spatial pooling
//! that turns frames into tokens.

use rand::Rng;

use super::diff::{temporal_diff, Boundary};
use crate::autodiff::{Binder, ParamStore, Var};
use crate::error::{Error, Result};

fn kaiming(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut impl Rng) {
    let fan_in: usize = shape[1..].iter().product();
    store.uniform(name, shape, (6.0 / fan_in as f64).sqrt(), rng);
}

/// Raw/difference stem fusion on `[B, 3, T, H, W]` clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Bdcf {
    pub prefix: String,
    /// Channels produced by every stem.
    pub channels: usize,
    pub kernel: usize,
    pub alpha: f64,
    pub beta: f64,
    pub boundary: Boundary,
}

impl Bdcf {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            kernel: 7,
            alpha: 0.5,
            beta: 0.5,
            boundary: Boundary::Clamp,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (c, k) = (self.channels, self.kernel);
        kaiming(store, &self.name("stem1_raw.w"), &[c, 3, k, k], rng);
        kaiming(store, &self.name("stem1_diff.w"), &[c, 12, k, k], rng);
        kaiming(store, &self.name("stem2.w"), &[c, c, k, k], rng);
        for bn in ["stem1_raw.bn", "stem1_diff.bn", "stem2.bn"] {
            store.batch_norm(&self.name(bn), c);
        }
    }

    /// conv → BN → ReLU (→ 2×2 max-pool) on `[N, Ci, H, W]` frames.
    fn stem(&self, b: &Binder, x: Var, which: &str, pool: bool) -> Result<Var> {
        let g = b.graph;
        let y = g.conv2d(x, b.param(&self.name(&format!("{which}.w")))?, 1, self.kernel / 2)?;
        let y = g.relu(b.batch_norm(&self.name(&format!("{which}.bn")), y, 1)?);
        if pool {
            g.max_pool2d(y)
        } else {
            Ok(y)
        }
    }
}

/// `X_fu = α·Stem2(X_o) + β·Stem2(α·X_o + β·X_d)` with `X_o` and `X_d` the
/// raw and difference stems. Input `[B, 3, T, H, W]`; output
/// `[B, T, C1, H/2, W/2]`.
pub fn bdcf_forward(b: &Binder, video: Var, p: &Bdcf) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(video);
    if shape.len() != 5 || shape[1] != 3 {
        return Err(Error::shape(format!("video must be [B, 3, T, H, W], got {shape:?}")));
    }
    let (bsz, t, h, w) = (shape[0], shape[2], shape[3], shape[4]);
    if t < 5 {
        return Err(Error::input(format!("clip needs at least 5 frames, got {t}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::input(format!("frame size {h}x{w} must be divisible by 8")));
    }
    let frames = g.permute(video, &[0, 2, 1, 3, 4])?;
    let diffs = temporal_diff(g, frames, 1, 2, p.boundary)?;
    let frames = g.reshape(frames, &[bsz * t, 3, h, w])?;
    let diffs = g.reshape(diffs, &[bsz * t, 12, h, w])?;

    let xo = p.stem(b, frames, "stem1_raw", true)?;
    let xd = p.stem(b, diffs, "stem1_diff", true)?;
    let mix = g.add(g.scale(xo, p.alpha), g.scale(xd, p.beta))?;
    let raw_path = p.stem(b, xo, "stem2", false)?;
    let mix_path = p.stem(b, mix, "stem2", false)?;
    let fused = g.add(g.scale(raw_path, p.alpha), g.scale(mix_path, p.beta))?;
    g.reshape(fused, &[bsz, t, p.channels, h / 2, w / 2])
}

/// Mask-weighted spatial pooling of fused frames into tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Scfm {
    pub prefix: String,
    pub in_channels: usize,
    /// Token width.
    pub width: usize,
}

impl Scfm {
    pub fn new(prefix: impl Into<String>, in_channels: usize, width: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            width,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.width;
        kaiming(store, &self.name("reduce.w"), &[c, self.in_channels, 5, 5], rng);
        store.batch_norm(&self.name("reduce.bn"), c);
        kaiming(store, &self.name("mask.w"), &[1, c, 5, 5], rng);
        store.zeros(&self.name("mask.b"), &[1]);
        kaiming(store, &self.name("out.w"), &[c, c, 3], rng);
        store.batch_norm(&self.name("out.bn"), c);
    }
}

/// Spatial mask `(h·w)·σ(s) / (2·Σσ(s))` per frame for stem logits
/// `s: [N, 1, h, w]`; sums to `h·w/2` over each frame.
pub fn scfm_mask(b: &Binder, logits: Var) -> Result<Var> {
    let g = b.graph;
    let sig = g.sigmoid(logits);
    let mean = g.mean_axes_keep(sig, &[2, 3])?;
    g.div(sig, g.scale(mean, 2.0))
}

/// Fused frames `[B, T, C1, H', W']` → tokens `[B, C, T/2]` with the mask
/// grid at `H'/4 × W'/4` (one eighth of the input frame).
pub fn scfm_forward(b: &Binder, x: Var, p: &Scfm) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 5 || shape[2] != p.in_channels {
        return Err(Error::shape(format!(
            "expected [B, T, {}, H, W] frames, got {shape:?}",
            p.in_channels
        )));
    }
    let (bsz, t, h, w) = (shape[0], shape[1], shape[3], shape[4]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::input(format!("feature map {h}x{w} must be divisible by 4")));
    }
    if t % 2 != 0 {
        return Err(Error::input(format!("token pooling needs an even frame count, got {t}")));
    }
    let c = p.width;
    let frames = g.reshape(x, &[bsz * t, p.in_channels, h, w])?;
    let r = g.conv2d(frames, b.param(&p.name("reduce.w"))?, 4, 2)?;
    let r = g.relu(b.batch_norm(&p.name("reduce.bn"), r, 1)?);
    let (gh, gw) = (h / 4, w / 4);
    let r = g.reshape(r, &[bsz, t, c, gh, gw])?;
    let r = g.avg_pool_axis(r, 1, 2)?;
    let half = t / 2;
    let r = g.reshape(r, &[bsz * half, c, gh, gw])?;

    let logits = g.conv2d(r, b.param(&p.name("mask.w"))?, 1, 2)?;
    let logits = g.add(logits, g.reshape(b.param(&p.name("mask.b"))?, &[1, 1, 1, 1])?)?;
    let mask = scfm_mask(b, logits)?;
    let pooled = g.mean_axes_keep(g.mul(r, mask)?, &[2, 3])?;
    let tokens = g.reshape(pooled, &[bsz, half, c])?;
    let tokens = g.permute(tokens, &[0, 2, 1])?;
    let tokens = g.conv1d(tokens, b.param(&p.name("out.w"))?, 1, 1, 1)?;
    b.batch_norm(&p.name("out.bn"), tokens, 1)
}
