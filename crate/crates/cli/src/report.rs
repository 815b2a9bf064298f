//! Tables and figures assembled from the files `eval` and `ablate` leave in
//! the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pulsefuse::losses::{GroupMetrics, SkinTone};
use pulsefuse::model::{Modality, Toggles};
use pulsefuse::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::ablate::AblationRow;
use crate::config::RunConfig;
use crate::evaluate::{eval_file_stem, EvalReport};
use crate::figures::{bland_altman_chart, line_chart, Series};

const TEST_MODES: [Modality; 3] = [Modality::RgbOnly, Modality::RfOnly, Modality::Both];
/// Sessions that get per-session figures.
const FIGURE_SESSIONS: usize = 3;

fn mode_label(m: Modality) -> &'static str {
    match m {
        Modality::RgbOnly => "RGB",
        Modality::RfOnly => "RF",
        Modality::Both => "RGB&RF",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainRow {
    pub method: String,
    pub train: String,
    /// Indexed like the test columns: RGB, RF, RGB&RF.
    pub tests: [Option<GroupMetrics>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRow {
    pub mode: Modality,
    /// A skin-tone group or `delta` (dark minus light).
    pub group: String,
    pub n: Option<usize>,
    pub mae: f64,
    pub rmse: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub main: Vec<MainRow>,
    pub fairness: Vec<FairnessRow>,
    pub ablation: Vec<AblationRow>,
}

fn rho_txt(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

fn rho_csv(r: Option<f64>) -> String {
    r.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl Report {
    pub fn main_text(&self) -> String {
        let mut s = format!("{:<14} {:<8}", "Method", "Train");
        for m in TEST_MODES {
            let _ = write!(s, " | {:^23}", format!("Test {}", mode_label(m)));
        }
        s.push('\n');
        let _ = write!(s, "{:<14} {:<8}", "", "");
        for _ in TEST_MODES {
            let _ = write!(s, " | {:>7} {:>7} {:>7}", "MAE", "RMSE", "rho");
        }
        s.push('\n');
        for row in &self.main {
            let _ = write!(s, "{:<14} {:<8}", row.method, row.train);
            for t in &row.tests {
                match t {
                    Some(m) => {
                        let _ = write!(s, " | {:>7.2} {:>7.2} {:>7}", m.mae, m.rmse, rho_txt(m.rho));
                    }
                    None => {
                        let _ = write!(s, " | {:>7} {:>7} {:>7}", "-", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn main_csv(&self) -> String {
        let mut s = String::from("method,train,test,mae,rmse,rho\n");
        for row in &self.main {
            for (m, t) in TEST_MODES.iter().zip(&row.tests) {
                if let Some(t) = t {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:.4},{:.4},{}",
                        row.method,
                        row.train,
                        mode_label(*m),
                        t.mae,
                        t.rmse,
                        rho_csv(t.rho)
                    );
                }
            }
        }
        s
    }

    pub fn fairness_text(&self) -> String {
        let mut s = format!("{:<8} {:<7} {:>4} {:>7} {:>7} {:>7}\n", "Test", "Group", "n", "MAE", "RMSE", "rho");
        for r in &self.fairness {
            let n = r.n.map_or_else(|| "".into(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:<8} {:<7} {:>4} {:>7.2} {:>7.2} {:>7}",
                mode_label(r.mode),
                r.group,
                n,
                r.mae,
                r.rmse,
                rho_txt(r.rho)
            );
        }
        s
    }

    pub fn fairness_csv(&self) -> String {
        let mut s = String::from("test,group,n,mae,rmse,rho\n");
        for r in &self.fairness {
            let n = r.n.map_or_else(String::new, |n| n.to_string());
            let _ = writeln!(
                s,
                "{},{},{n},{:.4},{:.4},{}",
                mode_label(r.mode),
                r.group,
                r.mae,
                r.rmse,
                rho_csv(r.rho)
            );
        }
        s
    }

    pub fn ablation_text(&self) -> String {
        let mut s = String::new();
        for name in Toggles::NAMES {
            let _ = write!(s, "{name:^11}");
        }
        let _ = writeln!(s, " {:>7} {:>7} {:>7}", "MAE", "RMSE", "rho");
        for row in &self.ablation {
            for name in Toggles::NAMES {
                let _ = write!(s, "{:^11}", mark(row.toggles.get(name).unwrap_or(false)));
            }
            let m = &row.metrics;
            let _ = writeln!(s, " {:>7.2} {:>7.2} {:>7}", m.mae, m.rmse, rho_txt(m.rho));
        }
        s
    }

    pub fn ablation_csv(&self) -> String {
        let mut s = format!("variant,{},mae,rmse,rho\n", Toggles::NAMES.join(","));
        for row in &self.ablation {
            let flags: Vec<&str> = Toggles::NAMES
                .iter()
                .map(|n| if row.toggles.get(n).unwrap_or(false) { "1" } else { "0" })
                .collect();
            let m = &row.metrics;
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{}",
                row.variant,
                flags.join(","),
                m.mae,
                m.rmse,
                rho_csv(m.rho)
            );
        }
        s
    }
}

fn fairness_rows(eval: &EvalReport) -> Vec<FairnessRow> {
    let mut rows: Vec<FairnessRow> = SkinTone::ALL
        .iter()
        .filter_map(|t| eval.metrics.groups.get(t).map(|m| (t, m)))
        .map(|(t, m)| FairnessRow {
            mode: eval.mode,
            group: t.as_str().into(),
            n: Some(m.n),
            mae: m.mae,
            rmse: m.rmse,
            rho: m.rho,
        })
        .collect();
    if let Some(d) = eval.metrics.delta {
        rows.push(FairnessRow {
            mode: eval.mode,
            group: "delta".into(),
            n: None,
            mae: d.mae,
            rmse: d.rmse,
            rho: d.rho,
        });
    }
    rows
}

fn bland_altman_csv(eval: &EvalReport) -> String {
    let mut s = String::from("session_id,group,gt_bpm,pred_bpm,mean,diff\n");
    for r in &eval.records {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.session_id,
            r.group,
            r.gt_bpm,
            r.pred_bpm,
            (r.pred_bpm + r.gt_bpm) / 2.0,
            r.pred_bpm - r.gt_bpm
        );
    }
    if let Some(ba) = &eval.bland_altman {
        let _ = writeln!(s, "# bias {:.4}, limits [{:.4}, {:.4}]", ba.bias, ba.lower, ba.upper);
    }
    s
}

fn loss_points(csv: &str) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').filter_map(|v| v.parse().ok()).collect();
        if let [e, t, v] = f[..] {
            train.push((e, t));
            val.push((e, v));
        }
    }
    (train, val)
}

/// Reads `eval_<mode>.json`, `ablation.json` and `loss_log.csv` from
/// `input` and writes tables (`.txt`, `.csv`, `report.json`) and SVG figures
/// under `out`. Returns the paths written.
pub fn build_report(input: &Path, out: &Path) -> Result<(Report, Vec<PathBuf>)> {
    let dir = input;
    let evals: Vec<Option<EvalReport>> = TEST_MODES
        .iter()
        .map(|m| read_json(&dir.join(format!("{}.json", eval_file_stem(*m)))))
        .collect::<Result<_>>()?;
    let ablation: Vec<AblationRow> = read_json(&dir.join("ablation.json"))?.unwrap_or_default();
    if evals.iter().all(Option::is_none) && ablation.is_empty() {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: "no evaluation or ablation results to report".into(),
        });
    }
    let train_mode = match fs::read_to_string(dir.join("config.toml")) {
        Ok(text) => RunConfig::from_toml(&text).map(|c| c.mode).unwrap_or_default(),
        Err(_) => Modality::Both,
    };

    let mut report = Report {
        main: Vec::new(),
        fairness: Vec::new(),
        ablation,
    };
    if evals.iter().any(Option::is_some) {
        report.main.push(MainRow {
            method: "pulsefuse".into(),
            train: mode_label(train_mode).into(),
            tests: std::array::from_fn(|i| evals[i].as_ref().map(|e| e.metrics.overall)),
        });
    }
    for e in evals.iter().flatten() {
        report.fairness.extend(fairness_rows(e));
    }

    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("report.json", serde_json::to_string_pretty(&report)?)?;
    if !report.main.is_empty() {
        put("table_main.txt", report.main_text())?;
        put("table_main.csv", report.main_csv())?;
        put("fairness.txt", report.fairness_text())?;
        put("fairness.csv", report.fairness_csv())?;
    }
    if !report.ablation.is_empty() {
        put("ablation.txt", report.ablation_text())?;
        put("ablation.csv", report.ablation_csv())?;
    }
    for e in evals.iter().flatten() {
        put(&format!("bland_altman_{}.csv", e.mode.as_str()), bland_altman_csv(e))?;
    }

    let fig = out.join("figures");
    fs::create_dir_all(&fig)?;
    for e in evals.iter().flatten() {
        if let Some(ba) = &e.bland_altman {
            let p = fig.join(format!("bland_altman_{}.svg", e.mode.as_str()));
            bland_altman_chart(&p, &format!("Agreement, test {}", mode_label(e.mode)), ba)?;
            written.push(p);
        }
    }
    if let Some(both) = &evals[2] {
        for t in both.traces.iter().take(FIGURE_SESSIONS) {
            let time = |i: usize| i as f64 / t.fps;
            let p = fig.join(format!("bvp_{}.svg", t.session_id));
            line_chart(
                &p,
                &format!("BVP, {}", t.session_id),
                "time (s)",
                "amplitude",
                &[
                    Series {
                        label: "reference",
                        points: standardized(&t.gt_bvp).into_iter().enumerate().map(|(i, v)| (time(i), v)).collect(),
                    },
                    Series {
                        label: "estimate",
                        points: standardized(&t.pred_bvp).into_iter().enumerate().map(|(i, v)| (time(i), v)).collect(),
                    },
                ],
            )?;
            written.push(p);

            let mut series = vec![
                Series {
                    label: "reference",
                    points: t.hr_times.iter().copied().zip(t.gt_hr.iter().copied()).collect(),
                },
                Series {
                    label: "RGB&RF",
                    points: t.hr_times.iter().copied().zip(t.pred_hr.iter().copied()).collect(),
                },
            ];
            let rgb_trace = evals[0]
                .as_ref()
                .and_then(|r| r.traces.iter().find(|x| x.session_id == t.session_id));
            let name = if let Some(r) = rgb_trace {
                series.push(Series {
                    label: "RGB only",
                    points: r.hr_times.iter().copied().zip(r.pred_hr.iter().copied()).collect(),
                });
                format!("rgb_vs_fusion_{}.svg", t.session_id)
            } else {
                format!("hr_{}.svg", t.session_id)
            };
            let p = fig.join(name);
            line_chart(&p, &format!("Heart rate, {}", t.session_id), "time (s)", "bpm", &series)?;
            written.push(p);
        }
    }
    if let Ok(csv) = fs::read_to_string(dir.join("loss_log.csv")) {
        let (train, val) = loss_points(&csv);
        if !train.is_empty() {
            let p = fig.join("loss.svg");
            line_chart(
                &p,
                "Training loss",
                "epoch",
                "loss",
                &[
                    Series {
                        label: "train",
                        points: train,
                    },
                    Series {
                        label: "validation",
                        points: val,
                    },
                ],
            )?;
            written.push(p);
        }
    }
    Ok((report, written))
}

fn standardized(x: &[f64]) -> Vec<f64> {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter().map(|v| (v - mean) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_marks_components() {
        let m = GroupMetrics {
            n: 4,
            mae: 1.5,
            rmse: 2.0,
            rho: None,
        };
        let report = Report {
            main: vec![],
            fairness: vec![],
            ablation: vec![
                AblationRow {
                    variant: "full".into(),
                    toggles: Toggles::default(),
                    best_epoch: 3,
                    metrics: m,
                },
                AblationRow {
                    variant: "cfft".into(),
                    toggles: Toggles::without("cfft").unwrap(),
                    best_epoch: 2,
                    metrics: m,
                },
            ],
        };
        let text = report.ablation_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].matches('✓').count(), 5);
        assert_eq!(lines[2].matches('✗').count(), 1);
        assert!(lines[2].contains("1.50") && lines[2].trim_end().ends_with('-'));
        let csv = report.ablation_csv();
        assert!(csv.contains("cfft,1,0,1,1,1,1.5000,2.0000,\n"), "{csv}");
    }

    #[test]
    fn loss_csv_parses_back() {
        let (t, v) = loss_points("epoch,train_loss,val_loss\n1,0.5,0.75\n2,0.25,0.5\n");
        assert_eq!(t, vec![(1.0, 0.5), (2.0, 0.25)]);
        assert_eq!(v, vec![(1.0, 0.75), (2.0, 0.5)]);
    }
}
