//! Training objectives on predicted pulse waveforms, spectral heart-rate
//! readout and evaluation metrics.

mod hr;
mod metrics;

pub use hr::{estimate_hr, BvpSignal, DEFAULT_HR_BAND};
pub use metrics::{
    bland_altman, compute_metrics, pearson, BlandAltman, FairnessDelta, GroupMetrics, MetricsReport,
    SessionRecord, SkinTone,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Frequency grid points per window half-width in the spectral loss.
pub const GRID_PER_HALFWIDTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the spectral term.
    pub lambda: f64,
    /// Half-width `w` of the in-band window around the target peak (Hz).
    pub window_halfwidth: f64,
    pub hr_band: [f64; 2],
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            window_halfwidth: 0.1,
            hr_band: DEFAULT_HR_BAND,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.hr_band;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.window_halfwidth > 0.0 && self.window_halfwidth.is_finite()) {
            return Err(Error::config(format!(
                "loss.window_halfwidth must be > 0, got {}",
                self.window_halfwidth
            )));
        }
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::config(format!("loss.hr_band must satisfy 0 <= lo < hi, got {lo}..{hi}")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon must be > 0"));
        }
        Ok(())
    }
}

fn check_pair(y: &[f64], yhat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::shape(format!(
            "signal lengths differ: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.len() < min_len {
        return Err(Error::input(format!("need at least {min_len} samples, got {}", y.len())));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite sample"));
    }
    Ok(())
}

/// `1 - r(y, yhat)` and its gradient with respect to `yhat`.
pub fn neg_pearson_with_grad(y: &[f64], yhat: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(y, yhat, 2)?;
    let n = y.len() as f64;
    let (sy, sx) = (y.iter().sum::<f64>(), yhat.iter().sum::<f64>());
    let sxy: f64 = y.iter().zip(yhat).map(|(a, b)| a * b).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let sxx: f64 = yhat.iter().map(|a| a * a).sum();
    let num = n * sxy - sx * sy;
    let ay = n * syy - sy * sy;
    let ax = n * sxx - sx * sx;
    // Relative floor: cancellation leaves ~1e-16 of the raw second moment.
    if ay <= 1e-12 * n * syy || ay <= 0.0 {
        return Err(Error::DegenerateSignal("target has zero variance".into()));
    }
    if ax <= 1e-12 * n * sxx || ax <= 0.0 {
        return Err(Error::DegenerateSignal("prediction has zero variance".into()));
    }
    let s = (ax * ay).sqrt();
    let r = (num / s).clamp(-1.0, 1.0);
    let grad = y
        .iter()
        .zip(yhat)
        .map(|(&yi, &xi)| -((n * yi - sy) / s - r * (n * xi - sx) / ax))
        .collect();
    Ok((1.0 - r, grad))
}

pub fn neg_pearson_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    neg_pearson_with_grad(y, yhat).map(|(v, _)| v)
}

/// Evaluation grid inside the band: `f_j = lo + j·df`, `df = w / 5`.
struct Grid {
    freqs: Vec<f64>,
    df: f64,
}

impl Grid {
    fn new(cfg: &LossConfig, fs: f64) -> Result<Self> {
        cfg.validate()?;
        let [lo, hi] = cfg.hr_band;
        if !(fs > 0.0) || hi > fs / 2.0 {
            return Err(Error::config(format!(
                "hr_band upper edge {hi} Hz exceeds Nyquist {} Hz",
                fs / 2.0
            )));
        }
        let df = cfg.window_halfwidth / GRID_PER_HALFWIDTH as f64;
        let m = ((hi - lo) / df + 1e-9).floor() as usize;
        if m < 2 * GRID_PER_HALFWIDTH {
            return Err(Error::config("hr_band narrower than the in-band window"));
        }
        Ok(Self {
            freqs: (0..=m).map(|j| lo + j as f64 * df).collect(),
            df,
        })
    }

    /// Per-point (cos, sin) sums and the power `|X(f)|² / N`.
    fn spectrum(&self, x: &[f64], fs: f64) -> Vec<(f64, f64, f64)> {
        let n = x.len() as f64;
        self.freqs
            .iter()
            .map(|&f| {
                let (mut c, mut s) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let th = 2.0 * PI * f * i as f64 / fs;
                    c += v * th.cos();
                    s += v * th.sin();
                }
                (c, s, (c * c + s * s) / n)
            })
            .collect()
    }

    /// Trapezoid weights for the in-band and out-of-band integrals, given the
    /// peak index.
    fn weights(&self, peak: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.freqs.len();
        let (mut win, mut wout) = (vec![0.0; m], vec![0.0; m]);
        let inside = |j: usize| j.abs_diff(peak) <= GRID_PER_HALFWIDTH;
        for j in 0..m - 1 {
            let dst = if inside(j) && inside(j + 1) { &mut win } else { &mut wout };
            dst[j] += self.df / 2.0;
            dst[j + 1] += self.df / 2.0;
        }
        (win, wout)
    }
}

/// Negated in-band / out-of-band power ratio of `yhat` around the target's
/// in-band spectral peak, with its gradient.
pub fn snr_with_grad(y: &[f64], yhat: &[f64], fs: f64, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_pair(y, yhat, 16)?;
    let grid = Grid::new(cfg, fs)?;
    if yhat.iter().all(|&v| v == 0.0) {
        return Ok((0.0, vec![0.0; yhat.len()]));
    }
    let target = grid.spectrum(y, fs);
    let peak = target
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
        .map(|(j, _)| j)
        .expect("non-empty grid");
    let (win, wout) = grid.weights(peak);
    let pred = grid.spectrum(yhat, fs);
    let p_in: f64 = pred.iter().zip(&win).map(|(p, w)| p.2 * w).sum();
    let p_out: f64 = pred.iter().zip(&wout).map(|(p, w)| p.2 * w).sum();
    let den = p_out + cfg.epsilon;
    let n = yhat.len() as f64;
    let grad = (0..yhat.len())
        .map(|i| {
            let (mut d_in, mut d_out) = (0.0, 0.0);
            for (j, &f) in grid.freqs.iter().enumerate() {
                let th = 2.0 * PI * f * i as f64 / fs;
                let dp = 2.0 * (pred[j].0 * th.cos() + pred[j].1 * th.sin()) / n;
                d_in += win[j] * dp;
                d_out += wout[j] * dp;
            }
            -(d_in * den - p_in * d_out) / (den * den)
        })
        .collect();
    Ok((-p_in / den, grad))
}

pub fn snr_loss(y: &[f64], yhat: &[f64], fs: f64, cfg: &LossConfig) -> Result<f64> {
    snr_with_grad(y, yhat, fs, cfg).map(|(v, _)| v)
}

pub fn total_with_grad(y: &[f64], yhat: &[f64], fs: f64, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (np, mut grad) = neg_pearson_with_grad(y, yhat)?;
    if cfg.lambda == 0.0 {
        cfg.validate()?;
        return Ok((np, grad));
    }
    let (snr, gs) = snr_with_grad(y, yhat, fs, cfg)?;
    for (g, s) in grad.iter_mut().zip(gs) {
        *g += cfg.lambda * s;
    }
    Ok((np + cfg.lambda * snr, grad))
}

pub fn total_loss(y: &[f64], yhat: &[f64], fs: f64, cfg: &LossConfig) -> Result<f64> {
    total_with_grad(y, yhat, fs, cfg).map(|(v, _)| v)
}

/// Batch-mean total loss of `pred` `[B, T]` against constant targets, as a
/// tape op.
pub fn total_loss_var(g: &Graph, pred: Var, target: &Array, fs: f64, cfg: &LossConfig) -> Result<Var> {
    let p = g.value(pred).clone();
    if p.ndim() != 2 || p.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            p.shape(),
            target.shape()
        )));
    }
    let (batch, len) = (p.shape()[0], p.shape()[1]);
    let mut total = 0.0;
    let mut grad = Array::zeros(vec![batch, len]);
    for bi in 0..batch {
        let y: Vec<f64> = (0..len).map(|t| target[[bi, t]]).collect();
        let yhat: Vec<f64> = (0..len).map(|t| p[[bi, t]]).collect();
        let (v, gr) = total_with_grad(&y, &yhat, fs, cfg)?;
        total += v / batch as f64;
        for (t, gv) in gr.into_iter().enumerate() {
            grad[[bi, t]] = gv / batch as f64;
        }
    }
    let value = Array::from_elem(vec![], total);
    Ok(g.custom(&[pred], value, move |up, _, _, _| vec![Some(&grad * up.sum())]))
}

#[cfg(test)]
mod tests;
