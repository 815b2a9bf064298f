use std::fs;
use std::path::Path;

use pulsefuse::autodiff::ParamStore;
use pulsefuse::data::Session;
use pulsefuse::losses::{
    bland_altman, compute_metrics, estimate_hr, BlandAltman, BvpSignal, MetricsReport, SessionRecord, SkinTone,
};
use pulsefuse::model::{Modality, Model, Toggles};
use pulsefuse::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RhoScope, RunConfig};
use crate::train::{batch_inputs, predict, window_arrays, Checkpoint};

/// Per-session signals kept for the figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub session_id: String,
    pub group: SkinTone,
    pub fps: f64,
    pub pred_bvp: Vec<f64>,
    pub gt_bvp: Vec<f64>,
    /// Window centres in seconds for the sliding HR estimates.
    pub hr_times: Vec<f64>,
    pub pred_hr: Vec<f64>,
    pub gt_hr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Modality,
    pub toggles: Toggles,
    pub rho_scope: RhoScope,
    pub records: Vec<SessionRecord>,
    pub metrics: MetricsReport,
    pub bland_altman: Option<BlandAltman>,
    pub traces: Vec<SessionTrace>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("mode = {}\nsessions = {}\n", self.mode.as_str(), self.records.len());
        s.push_str(&self.metrics.to_text());
        if let Some(ba) = &self.bland_altman {
            s.push_str(&format!(
                "bland_altman.bias = {:.4}\nbland_altman.lower = {:.4}\nbland_altman.upper = {:.4}\n",
                ba.bias, ba.lower, ba.upper
            ));
        }
        s
    }
}

/// Start offsets of `win`-sample windows every `step` samples; one window
/// covering everything when the signal is shorter.
fn window_starts(n: usize, win: usize, step: usize) -> Vec<usize> {
    if n <= win {
        return vec![0];
    }
    (0..=(n - win) / step).map(|k| k * step).collect()
}

fn score_session(
    model: &Model,
    store: &ParamStore,
    cfg: &RunConfig,
    session: &Session,
    mode: Modality,
) -> Result<(SessionRecord, SessionTrace)> {
    let frames = session.frames() & !1;
    let (video, rf, _) = batch_inputs(&[window_arrays(session, 0, frames)?], mode)?;
    let pred = predict(model, store, video, rf)?;
    let pred_bvp: Vec<f64> = pred.iter().copied().collect();
    let gt_bvp: Vec<f64> = session.ppg[..frames].iter().map(|&v| v as f64).collect();
    let band = cfg.loss.hr_band;
    let fs = session.fps;
    let pred_bpm = estimate_hr(&BvpSignal::new(pred_bvp.clone(), fs)?, band)?;
    let gt_bpm = estimate_hr(&BvpSignal::new(gt_bvp.clone(), fs)?, band)?;

    let win = ((cfg.eval.hr_window_s * fs).round() as usize).min(frames);
    let step = ((cfg.eval.hr_step_s * fs).round() as usize).max(1);
    let (mut hr_times, mut pred_hr, mut gt_hr) = (Vec::new(), Vec::new(), Vec::new());
    for start in window_starts(frames, win, step) {
        let end = (start + win).min(frames);
        hr_times.push((start + end) as f64 / 2.0 / fs);
        pred_hr.push(estimate_hr(&BvpSignal::new(pred_bvp[start..end].to_vec(), fs)?, band)?);
        gt_hr.push(estimate_hr(&BvpSignal::new(gt_bvp[start..end].to_vec(), fs)?, band)?);
    }
    let record = SessionRecord {
        session_id: session.session_id.clone(),
        group: session.skin_tone,
        gt_bpm,
        pred_bpm,
    };
    let trace = SessionTrace {
        session_id: session.session_id.clone(),
        group: session.skin_tone,
        fps: fs,
        pred_bvp,
        gt_bvp,
        hr_times,
        pred_hr,
        gt_hr,
    };
    Ok((record, trace))
}

/// Scores every session in `sessions` with the checkpoint's parameters.
/// Session order is preserved whether or not the pool is used.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, sessions: &[&Session], mode: Modality) -> Result<EvalReport> {
    let model = ckpt.model()?;
    let store = &ckpt.params;
    let scored: Vec<(SessionRecord, SessionTrace)> = if cfg.eval.parallel {
        sessions
            .par_iter()
            .map(|s| score_session(&model, store, cfg, s, mode))
            .collect::<Result<_>>()?
    } else {
        sessions
            .iter()
            .map(|s| score_session(&model, store, cfg, s, mode))
            .collect::<Result<_>>()?
    };
    let (records, traces): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let mut metrics = SessionRecord::metrics(&records)?;
    if cfg.eval.rho_scope == RhoScope::Window {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        let mut groups = Vec::new();
        for t in &traces {
            pred.extend(&t.pred_hr);
            gt.extend(&t.gt_hr);
            groups.extend(std::iter::repeat(t.group).take(t.pred_hr.len()));
        }
        let windowed = compute_metrics(&pred, &gt, Some(&groups))?;
        metrics.overall.rho = windowed.overall.rho;
        for (tone, m) in metrics.groups.iter_mut() {
            m.rho = windowed.groups.get(tone).and_then(|w| w.rho);
        }
        if let (Some(d), Some(w)) = (metrics.delta.as_mut(), windowed.delta) {
            d.rho = w.rho;
        }
    }
    let pred: Vec<f64> = records.iter().map(|r| r.pred_bpm).collect();
    let gt: Vec<f64> = records.iter().map(|r| r.gt_bpm).collect();
    let bland_altman = if records.len() >= 2 { Some(bland_altman(&pred, &gt)?) } else { None };
    Ok(EvalReport {
        mode,
        toggles: ckpt.config.model.toggles,
        rho_scope: cfg.eval.rho_scope,
        records,
        metrics,
        bland_altman,
        traces,
    })
}

pub fn eval_file_stem(mode: Modality) -> String {
    format!("eval_{}", mode.as_str())
}

/// Writes `eval_<mode>.json` and `eval_<mode>.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = eval_file_stem(report.mode);
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join(format!("{stem}.txt")), report.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::window_starts;

    #[test]
    fn windows_cover_the_signal() {
        assert_eq!(window_starts(300, 150, 30), vec![0, 30, 60, 90, 120, 150]);
        assert_eq!(window_starts(100, 150, 30), vec![0]);
        assert_eq!(window_starts(150, 150, 30), vec![0]);
    }
}
