use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkinTone {
    Light,
    Medium,
    Dark,
}

impl SkinTone {
    pub const ALL: [SkinTone; 3] = [SkinTone::Light, SkinTone::Medium, SkinTone::Dark];

    pub fn as_str(self) -> &'static str {
        match self {
            SkinTone::Light => "light",
            SkinTone::Medium => "medium",
            SkinTone::Dark => "dark",
        }
    }
}

impl fmt::Display for SkinTone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SkinTone {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "light" => Ok(SkinTone::Light),
            "medium" => Ok(SkinTone::Medium),
            "dark" => Ok(SkinTone::Dark),
            other => Err(format!("unknown skin tone {other:?} (expected light, medium or dark)")),
        }
    }
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = a.iter().chain(b).map(|v| v * v).sum::<f64>();
    if saa <= 1e-24 * scale || sbb <= 1e-24 * scale || saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Undefined for fewer than two points or constant values.
    pub rho: Option<f64>,
}

impl GroupMetrics {
    fn compute(pred: &[f64], gt: &[f64]) -> Self {
        let n = pred.len();
        let (mut abs, mut sq) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            abs += (p - g).abs();
            sq += (p - g) * (p - g);
        }
        Self {
            n,
            mae: abs / n as f64,
            rmse: (sq / n as f64).sqrt(),
            rho: pearson(pred, gt),
        }
    }
}

/// Dark minus light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessDelta {
    pub mae: f64,
    pub rmse: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub groups: BTreeMap<SkinTone, GroupMetrics>,
    pub delta: Option<FairnessDelta>,
}

pub fn compute_metrics(pred: &[f64], gt: &[f64], groups: Option<&[SkinTone]>) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} references",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("no sessions to score"));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite heart rate"));
    }
    let mut by_group = BTreeMap::new();
    if let Some(labels) = groups {
        if labels.len() != pred.len() {
            return Err(Error::shape(format!(
                "{} labels for {} sessions",
                labels.len(),
                pred.len()
            )));
        }
        for tone in SkinTone::ALL {
            let (p, g): (Vec<f64>, Vec<f64>) = labels
                .iter()
                .zip(pred.iter().zip(gt))
                .filter(|(l, _)| **l == tone)
                .map(|(_, (p, g))| (*p, *g))
                .unzip();
            if !p.is_empty() {
                by_group.insert(tone, GroupMetrics::compute(&p, &g));
            }
        }
    }
    let delta = match (by_group.get(&SkinTone::Dark), by_group.get(&SkinTone::Light)) {
        (Some(d), Some(l)) => Some(FairnessDelta {
            mae: d.mae - l.mae,
            rmse: d.rmse - l.rmse,
            rho: d.rho.zip(l.rho).map(|(a, b)| a - b),
        }),
        _ => None,
    };
    Ok(MetricsReport {
        overall: GroupMetrics::compute(pred, gt),
        groups: by_group,
        delta,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// `key = value` lines; undefined correlations print as `undefined`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |prefix: &str, m: &GroupMetrics| {
            let _ = writeln!(s, "{prefix}n = {}", m.n);
            let _ = writeln!(s, "{prefix}mae = {:.4}", m.mae);
            let _ = writeln!(s, "{prefix}rmse = {:.4}", m.rmse);
            let _ = writeln!(s, "{prefix}rho = {}", opt(m.rho));
        };
        put("", &self.overall);
        for (tone, m) in &self.groups {
            put(&format!("group.{tone}."), m);
        }
        if let Some(d) = &self.delta {
            let _ = writeln!(s, "delta.mae = {:.4}", d.mae);
            let _ = writeln!(s, "delta.rmse = {:.4}", d.rmse);
            let _ = writeln!(s, "delta.rho = {}", opt(d.rho));
        }
        s
    }

    /// One table row: label, then MAE, RMSE and rho columns.
    pub fn row(&self, label: &str) -> String {
        let rho = self.overall.rho.map_or_else(|| "-".to_string(), |r| format!("{r:.2}"));
        format!("{label:<28} {:>7.2} {:>7.2} {:>7}", self.overall.mae, self.overall.rmse, rho)
    }
}

/// One scored session in the machine-readable output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub group: SkinTone,
    pub gt_bpm: f64,
    pub pred_bpm: f64,
}

impl SessionRecord {
    pub fn metrics(records: &[SessionRecord]) -> Result<MetricsReport> {
        let pred: Vec<f64> = records.iter().map(|r| r.pred_bpm).collect();
        let gt: Vec<f64> = records.iter().map(|r| r.gt_bpm).collect();
        let groups: Vec<SkinTone> = records.iter().map(|r| r.group).collect();
        compute_metrics(&pred, &gt, Some(&groups))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    /// `(mean of the pair, pred - gt)` per pair.
    pub points: Vec<(f64, f64)>,
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn bland_altman(pred: &[f64], gt: &[f64]) -> Result<BlandAltman> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::shape(format!(
            "agreement analysis needs two equal-length lists of at least 2, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let points: Vec<(f64, f64)> = pred.iter().zip(gt).map(|(p, g)| ((p + g) / 2.0, p - g)).collect();
    let n = points.len() as f64;
    let bias = points.iter().map(|p| p.1).sum::<f64>() / n;
    let var = points.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    Ok(BlandAltman {
        points,
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
    })
}
