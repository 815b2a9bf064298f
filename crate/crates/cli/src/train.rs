use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use pulsefuse::autodiff::{Adam, Array, Binder, Graph, ParamStore};
use pulsefuse::data::{load_dataset, split_dataset, Folds, Session};
use pulsefuse::losses::total_loss_var;
use pulsefuse::model::{Modality, Model};
use pulsefuse::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Sessions plus their subject-disjoint folds.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sessions: Vec<Session>,
    pub folds: Folds,
}

impl Prepared {
    pub fn fold(&self, k: usize) -> Vec<&Session> {
        self.folds.fold(k).iter().map(|&i| &self.sessions[i]).collect()
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Prepared> {
    prepare(load_dataset(&cfg.data.root)?, cfg)
}

/// Checks the sessions against the model's rates and channel count, then
/// splits them with the run seed.
pub fn prepare(sessions: Vec<Session>, cfg: &RunConfig) -> Result<Prepared> {
    let m = &cfg.model;
    for s in &sessions {
        if (s.fps - m.fps).abs() > 1e-9 || (s.rf_rate - m.rf_rate).abs() > 1e-9 || s.rf.shape()[0] != m.rf_channels {
            return Err(Error::InvalidInput(format!(
                "session {} ({} fps, {} Hz, {} radar channels) does not match the model ({} fps, {} Hz, {} channels)",
                s.session_id,
                s.fps,
                s.rf_rate,
                s.rf.shape()[0],
                m.fps,
                m.rf_rate,
                m.rf_channels
            )));
        }
        if s.frames() < cfg.train.window_frames {
            return Err(Error::InvalidInput(format!(
                "session {} has {} frames, shorter than train.window_frames = {}",
                s.session_id,
                s.frames(),
                cfg.train.window_frames
            )));
        }
    }
    let folds = split_dataset(&sessions, cfg.data.split, cfg.seed)?;
    Ok(Prepared { sessions, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    /// Epoch (1-based) whose parameters are stored: the best validation loss.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Rejects files from another format version and parameter sets that do
    /// not match the architecture recorded alongside them.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let probe: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::Version(format!("{}: {e}", path.display())))?;
        let version = probe.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version(format!(
                "{}: format_version {version:?}, expected {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let ckpt: Checkpoint =
            serde_json::from_value(probe).map_err(|e| Error::Version(format!("{}: {e}", path.display())))?;
        let expected = ckpt.model()?.init_store(0)?.signature();
        if ckpt.params.signature() != expected {
            return Err(Error::Version(format!(
                "{}: stored parameters do not match the recorded architecture",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    /// The evaluation config must describe the same architecture.
    pub fn ensure_matches(&self, cfg: &RunConfig) -> Result<()> {
        if self.config.model != cfg.model {
            return Err(Error::Version(
                "checkpoint was trained with a different [model] configuration".into(),
            ));
        }
        Ok(())
    }
}

/// Stacks single-item windows along the batch axis; the modality that is
/// switched off is replaced by zeros of the same shape.
pub(crate) fn batch_inputs(items: &[(Array, Array, Vec<f64>)], mode: Modality) -> Result<(Array, Array, Array)> {
    let stack = |pick: &dyn Fn(&(Array, Array, Vec<f64>)) -> &Array| -> Result<Array> {
        let views: Vec<_> = items.iter().map(|it| pick(it).view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    };
    let mut video = stack(&|it| &it.0)?;
    let mut rf = stack(&|it| &it.1)?;
    if !mode.uses_rgb() {
        video.fill(0.0);
    }
    if !mode.uses_rf() {
        rf.fill(0.0);
    }
    let len = items[0].2.len();
    let flat: Vec<f64> = items.iter().flat_map(|it| it.2.iter().copied()).collect();
    let target = Array::from_shape_vec(vec![items.len(), len], flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((video, rf, target))
}

pub(crate) fn window_arrays(s: &Session, start: usize, len: usize) -> Result<(Array, Array, Vec<f64>)> {
    let (v, r, p) = s.window(start, len)?;
    Ok((v.data().clone(), r.data().clone(), p))
}

/// BVP prediction for one input batch in evaluation mode.
pub fn predict(model: &Model, store: &ParamStore, video: Array, rf: Array) -> Result<Array> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = model.forward(&b, g.constant(video), g.constant(rf))?;
    let value = g.value(out).clone();
    Ok(value)
}

fn loss_on(model: &Model, store: &ParamStore, cfg: &RunConfig, session: &Session, mode: Modality) -> Result<f64> {
    let (video, rf, target) = batch_inputs(&[window_arrays(session, 0, session.frames() & !1)?], mode)?;
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let pred = model.forward(&b, g.constant(video), g.constant(rf))?;
    if g.value(pred).iter().any(|v| !v.is_finite()) {
        return Ok(f64::NAN);
    }
    let loss = total_loss_var(&g, pred, &target, session.fps, &cfg.loss)?;
    Ok(g.scalar(loss))
}

/// Mean loss over full validation sessions.
fn validation_loss(model: &Model, store: &ParamStore, cfg: &RunConfig, sessions: &[&Session]) -> Result<f64> {
    let mut total = 0.0;
    for s in sessions {
        total += loss_on(model, store, cfg, s, cfg.mode)?;
    }
    Ok(total / sessions.len().max(1) as f64)
}

/// Trains from the seeded initialisation and returns the checkpoint with the
/// lowest validation loss. Fully determined by the config and the data.
pub fn train(cfg: &RunConfig, data: &Prepared) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = Model::new(cfg.model)?;
    let mut store = model.init_store(cfg.seed)?;
    let mut adam = Adam::new(cfg.train.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let train_set = data.fold(0);
    let val_set = data.fold(1);
    let len = cfg.train.window_frames;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.train.epochs {
        let clock = Instant::now();
        let mut windows: Vec<(usize, usize)> = Vec::new();
        for (i, s) in train_set.iter().enumerate() {
            for _ in 0..cfg.train.windows_per_session {
                // Even starts keep the radar offset an integer number of samples.
                let start = rng.gen_range(0..=(s.frames() - len) / 2) * 2;
                windows.push((i, start));
            }
        }
        windows.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (bi, chunk) in windows.chunks(cfg.train.batch_size).enumerate() {
            let items = chunk
                .iter()
                .map(|&(i, start)| window_arrays(train_set[i], start, len))
                .collect::<Result<Vec<_>>>()?;
            let (video, rf, target) = batch_inputs(&items, cfg.mode)?;
            let (loss, grads, updates) = {
                let g = Graph::new();
                let b = Binder::new(&g, &store, true);
                let pred = model.forward(&b, g.constant(video), g.constant(rf))?;
                // The loss refuses non-finite input, so a blown-up forward pass
                // is caught here and reported as divergence below.
                if g.value(pred).iter().all(|v| v.is_finite()) {
                    let loss = total_loss_var(&g, pred, &target, cfg.model.fps, &cfg.loss)?;
                    let value = g.scalar(loss);
                    let grads = b.grads(&g.backward(loss));
                    (value, grads, b.take_bn_updates())
                } else {
                    (f64::NAN, Default::default(), Vec::new())
                }
            };
            let finite = loss.is_finite() && grads.values().all(|a| a.iter().all(|v| v.is_finite()));
            if !finite {
                let sessions: Vec<String> = chunk
                    .iter()
                    .map(|&(i, start)| format!("{}@{start}", train_set[i].session_id))
                    .collect();
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    sessions: sessions.join(", "),
                });
            }
            adam.step(&mut store, &grads);
            store.apply_bn_updates(&updates, cfg.train.bn_momentum);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let val_loss = validation_loss(&model, &store, cfg, &val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batches,
                sessions: "validation".into(),
            });
        }
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}, val loss {val_loss:.4} ({:.1} s)",
            cfg.train.epochs,
            clock.elapsed().as_secs_f64()
        );
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, store.clone()));
        }
    }
    let (epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, store),
    };
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epoch,
        history,
        params,
    })
}

pub fn loss_log_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        s.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loss));
    }
    s
}

/// Trains and writes `checkpoint.json`, `loss_log.csv` and the resolved
/// `config.toml` into `dir`.
pub fn train_to_dir(cfg: &RunConfig, data: &Prepared, dir: &Path) -> Result<Checkpoint> {
    let ckpt = train(cfg, data)?;
    fs::create_dir_all(dir)?;
    ckpt.save(&dir.join("checkpoint.json"))?;
    fs::write(dir.join("loss_log.csv"), loss_log_csv(&ckpt.history))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(ckpt)
}
