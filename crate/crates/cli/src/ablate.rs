use std::fs;
use std::path::Path;

use pulsefuse::losses::GroupMetrics;
use pulsefuse::model::{Modality, Toggles};
use pulsefuse::Result;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::evaluate::{evaluate, write_report};
use crate::train::{train_to_dir, Prepared};

pub const FULL: &str = "full";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub toggles: Toggles,
    pub best_epoch: usize,
    pub metrics: GroupMetrics,
}

/// `"all"` expands to the full model plus each single-component removal.
pub fn parse_variants(list: &str) -> Result<Vec<String>> {
    let list = list.trim();
    if list == "all" {
        let mut v = vec![FULL.to_string()];
        v.extend(Toggles::NAMES.iter().map(|s| s.to_string()));
        return Ok(v);
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if name != FULL {
            Toggles::without(name)?;
        }
        out.push(name.to_string());
    }
    Ok(out)
}

/// Trains and evaluates (on the test fold, both modalities) one model per
/// variant under `out_dir/ablation/<variant>/`. The `full` variant keeps the
/// configured toggles; the others switch off exactly one component.
pub fn ablate(cfg: &RunConfig, data: &Prepared, variants: &[String], out_dir: &Path) -> Result<Vec<AblationRow>> {
    let test = data.fold(2);
    let mut rows = Vec::new();
    for variant in variants {
        let mut run = cfg.clone();
        run.mode = Modality::Both;
        if variant != FULL {
            run.model.toggles = Toggles::without(variant)?;
        }
        let dir = out_dir.join("ablation").join(variant);
        log::info!("ablation variant {variant}");
        let ckpt = train_to_dir(&run, data, &dir)?;
        let report = evaluate(&ckpt, &run, &test, Modality::Both)?;
        write_report(&report, &dir)?;
        rows.push(AblationRow {
            variant: variant.clone(),
            toggles: run.model.toggles,
            best_epoch: ckpt.epoch,
            metrics: report.metrics.overall,
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablation.json"), serde_json::to_vec_pretty(&rows)?)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_lists() {
        assert_eq!(parse_variants("all").unwrap().len(), 1 + Toggles::NAMES.len());
        assert_eq!(parse_variants("full, cfft").unwrap(), vec!["full", "cfft"]);
        assert!(parse_variants("vim,attention").is_err());
    }
}
