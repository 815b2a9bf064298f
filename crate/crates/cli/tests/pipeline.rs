use std::fs;
use std::path::Path;
use std::process::Command;

use pulsefuse::data::{generate_dataset, save_session, Session};
use pulsefuse::losses::{SessionRecord, SkinTone};
use pulsefuse::model::{Modality, Toggles};
use pulsefuse::Error;
use pulsefuse_cli::ablate::{ablate, parse_variants, FULL};
use pulsefuse_cli::evaluate::{evaluate, write_report, EvalReport};
use pulsefuse_cli::report::build_report;
use pulsefuse_cli::train::{prepare, train, train_to_dir, Checkpoint, Prepared};
use pulsefuse_cli::{exit_code, RunConfig};

fn tiny_config(out: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 11
out_dir = "{}"
data.synth.subjects = 4
data.synth.sessions_per_subject = 1
data.synth.session.duration_s = 4.0
data.synth.session.height = 32
data.synth.session.width = 32
train.window_frames = 64
train.epochs = 1
train.batch_size = 2
train.lr = 1e-3
"#,
        out.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn tiny_data(cfg: &RunConfig) -> Prepared {
    prepare(generate_dataset(&cfg.data.synth).unwrap(), cfg).unwrap()
}

#[test]
fn one_epoch_smoke_run_has_finite_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let ckpt = train_to_dir(&cfg, &data, dir.path()).unwrap();
    assert_eq!(ckpt.history.len(), 1);
    assert!(ckpt.history[0].train_loss.is_finite() && ckpt.history[0].val_loss.is_finite());
    for f in ["checkpoint.json", "loss_log.csv", "config.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn equal_seeds_give_identical_loss_traces_and_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.epochs = 2;
    let data = tiny_data(&cfg);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    cfg.seed += 1;
    let c = train(&cfg, &tiny_data(&cfg)).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let ckpt = train(&cfg, &data).unwrap();
    let test = data.fold(2);
    let before = evaluate(&ckpt, &cfg, &test, Modality::Both).unwrap();
    let path = dir.path().join("ck.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, ckpt.params);
    let after = evaluate(&loaded, &cfg, &test, Modality::Both).unwrap();
    assert_eq!(before, after);
}

#[test]
fn serial_and_parallel_evaluation_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let ckpt = train(&cfg, &data).unwrap();
    let all: Vec<&Session> = data.sessions.iter().collect();
    let par = evaluate(&ckpt, &cfg, &all, Modality::Both).unwrap();
    cfg.eval.parallel = false;
    let ser = evaluate(&ckpt, &cfg, &all, Modality::Both).unwrap();
    assert_eq!(par, ser);
    let ids: Vec<&str> = par.records.iter().map(|r| r.session_id.as_str()).collect();
    let expected: Vec<&str> = all.iter().map(|s| s.session_id.as_str()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn rgb_only_equals_both_when_radar_is_silent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let ckpt = train(&cfg, &data).unwrap();
    let mut silent: Vec<Session> = data.sessions.clone();
    for s in &mut silent {
        s.rf.fill(0.0);
    }
    let refs: Vec<&Session> = silent.iter().collect();
    let both = evaluate(&ckpt, &cfg, &refs, Modality::Both).unwrap();
    let rgb = evaluate(&ckpt, &cfg, &refs, Modality::RgbOnly).unwrap();
    assert_eq!(both.records, rgb.records);
    assert_eq!(both.traces, rgb.traces);
    let rf = evaluate(&ckpt, &cfg, &refs, Modality::RfOnly).unwrap();
    assert!(rf.records.iter().all(|r| r.pred_bpm.is_finite()));
}

#[test]
fn exploding_updates_abort_with_the_offending_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.lr = 1e300;
    cfg.train.batch_size = 1;
    cfg.train.epochs = 3;
    let data = tiny_data(&cfg);
    match train(&cfg, &data) {
        Err(e @ Error::Divergence { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("subject"), "{msg}");
            assert_eq!(exit_code(&e), 4);
        }
        other => panic!("expected divergence, got {:?}", other.map(|c| c.history)),
    }
}

#[test]
fn incompatible_checkpoints_are_version_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let ckpt = train(&cfg, &data).unwrap();

    let mut other = cfg.clone();
    other.model.width = 8;
    assert!(matches!(ckpt.ensure_matches(&other), Err(Error::Version(_))));

    let path = dir.path().join("ck.json");
    ckpt.save(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":99", 1)).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Version(_)), "{err}");
    assert_eq!(exit_code(&err), 2);

    let mut edited = ckpt.clone();
    edited.config.model.toggles.cfft = false;
    edited.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Version(_))));
}

#[test]
fn ablation_rows_flip_one_component_each() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let variants = parse_variants("full,cfft").unwrap();
    let rows = ablate(&cfg, &data, &variants, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].toggles, Toggles::default());
    let off: Vec<&str> = Toggles::NAMES
        .iter()
        .copied()
        .filter(|n| rows[1].toggles.get(n) == Some(false))
        .collect();
    assert_eq!(off, vec!["cfft"]);
    assert!(rows[1].metrics.mae.is_finite());

    // The full variant is the ordinary training run.
    let ckpt = train(&cfg, &data).unwrap();
    let direct = evaluate(&ckpt, &cfg, &data.fold(2), Modality::Both).unwrap();
    assert_eq!(rows[0].variant, FULL);
    assert_eq!(rows[0].metrics, direct.metrics.overall);
    assert!(dir.path().join("ablation.json").is_file());
}

fn perfect_report(mode: Modality) -> EvalReport {
    let records: Vec<SessionRecord> = [(72.0, SkinTone::Light), (90.0, SkinTone::Dark), (65.0, SkinTone::Medium)]
        .iter()
        .enumerate()
        .map(|(i, &(hr, group))| SessionRecord {
            session_id: format!("s{i}"),
            group,
            gt_bpm: hr,
            pred_bpm: hr,
        })
        .collect();
    let pred: Vec<f64> = records.iter().map(|r| r.pred_bpm).collect();
    EvalReport {
        mode,
        toggles: Toggles::default(),
        rho_scope: Default::default(),
        metrics: SessionRecord::metrics(&records).unwrap(),
        bland_altman: Some(pulsefuse::losses::bland_altman(&pred, &pred).unwrap()),
        records,
        traces: vec![],
    }
}

#[test]
fn perfect_predictions_give_zero_agreement_limits() {
    let dir = tempfile::tempdir().unwrap();
    write_report(&perfect_report(Modality::Both), dir.path()).unwrap();
    let out = dir.path().join("out");
    build_report(dir.path(), &out).unwrap();
    let csv = fs::read_to_string(out.join("bland_altman_both.csv")).unwrap();
    assert!(csv.contains("# bias 0.0000, limits [0.0000, 0.0000]"), "{csv}");
    assert!(out.join("figures/bland_altman_both.svg").is_file());
    let table = fs::read_to_string(out.join("table_main.txt")).unwrap();
    assert!(table.contains("Test RGB&RF") && table.contains("Test RF") && table.contains("Test RGB"));
}

#[test]
fn reports_are_byte_stable_and_include_the_modality_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = tiny_data(&cfg);
    let ckpt = train_to_dir(&cfg, &data, dir.path()).unwrap();
    let test = data.fold(2);
    for mode in [Modality::Both, Modality::RgbOnly, Modality::RfOnly] {
        write_report(&evaluate(&ckpt, &cfg, &test, mode).unwrap(), dir.path()).unwrap();
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (_, files_a) = build_report(dir.path(), &a).unwrap();
    let (_, files_b) = build_report(dir.path(), &b).unwrap();
    assert_eq!(files_a.len(), files_b.len());
    for (fa, fb) in files_a.iter().zip(&files_b) {
        assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{}", fa.display());
    }
    let first = &test[0].session_id;
    assert!(a.join(format!("figures/rgb_vs_fusion_{first}.svg")).is_file());
    assert!(a.join(format!("figures/bvp_{first}.svg")).is_file());
    assert!(a.join("figures/loss.svg").is_file());
    let main = fs::read_to_string(a.join("table_main.csv")).unwrap();
    assert_eq!(main.lines().count(), 4, "{main}");
}

#[test]
fn binary_reports_config_and_data_failures_through_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_pulsefuse");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "train.learning_rate = 1.0\n").unwrap();
    let status = Command::new(bin).args(["train", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let cfg_path = dir.path().join("cfg.toml");
    fs::write(
        &cfg_path,
        format!("data.root = \"{}\"\n", dir.path().join("missing").display()),
    )
    .unwrap();
    let out = Command::new(bin).args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    let status = Command::new(bin)
        .args(["ablate", "--toggles", "vim,attention", "--config"])
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn binary_runs_synth_train_eval_report() {
    let bin = env!("CARGO_BIN_EXE_pulsefuse");
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("run"));
    cfg.data.root = dir.path().join("data");
    let text = cfg.to_toml();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, text).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).arg("--config").arg(&cfg_path).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    run(&["synth"]);
    let loaded = pulsefuse::data::load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(loaded.len(), 4);
    run(&["train"]);
    let eval_out = run(&["eval", "--mode", "rgb_only"]);
    assert!(eval_out.contains("mae = "));
    let status = Command::new(bin)
        .args(["report", "--in"])
        .arg(dir.path().join("run"))
        .arg("--out")
        .arg(dir.path().join("report"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("report/table_main.csv").is_file());
}

#[test]
fn saved_sessions_feed_the_same_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let sessions = generate_dataset(&cfg.data.synth).unwrap();
    for s in &sessions {
        save_session(dir.path(), s).unwrap();
    }
    let mut from_disk = cfg.clone();
    from_disk.data.root = dir.path().to_path_buf();
    let a = pulsefuse_cli::train::load_data(&from_disk).unwrap();
    let b = prepare(sessions, &cfg).unwrap();
    assert_eq!(a.folds, b.folds);
}
