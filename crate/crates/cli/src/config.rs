//! Run configuration: one TOML file with dotted namespaces
//! (`train.lr = 1e-3`, `model.toggles.cfft = false`, ...). Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use pulsefuse::autodiff::AdamConfig;
use pulsefuse::data::{DatasetConfig, SplitScheme};
use pulsefuse::losses::LossConfig;
use pulsefuse::model::{Modality, Model, ModelConfig};
use pulsefuse::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Modality used for training and as the default evaluation mode.
    pub mode: Modality,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            mode: Modality::Both,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root in the `<subject>/<session>/` layout.
    pub root: PathBuf,
    pub split: SplitScheme,
    /// Generator settings used by `synth`.
    pub synth: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synthetic"),
            split: SplitScheme::default(),
            synth: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training windows are this many video frames, with random starts.
    pub window_frames: usize,
    pub windows_per_session: usize,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 30,
            window_frames: 128,
            windows_per_session: 1,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// What the correlation in the metrics is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoScope {
    /// One HR pair per session.
    #[default]
    Session,
    /// One HR pair per sliding window (`hr_window_s`, `hr_step_s`).
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rho_scope: RhoScope,
    /// Sliding-window HR traces (also used for the HR-trace figures).
    pub hr_window_s: f64,
    pub hr_step_s: f64,
    /// Evaluate sessions on the rayon pool; results do not depend on it.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rho_scope: RhoScope::Session,
            hr_window_s: 5.0,
            hr_step_s: 1.0,
            parallel: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        Model::new(self.model)?;
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.windows_per_session == 0 || !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(Error::Config("train.lr, train.batch_size and train.windows_per_session must be positive, train.bn_momentum in [0, 1]".into()));
        }
        if t.window_frames < 16 || t.window_frames % 2 != 0 {
            return Err(Error::Config(format!(
                "train.window_frames must be even and at least 16, got {}",
                t.window_frames
            )));
        }
        if !(self.eval.hr_window_s >= 2.0 && self.eval.hr_step_s > 0.0) {
            return Err(Error::Config("eval.hr_window_s must be >= 2 s and eval.hr_step_s > 0".into()));
        }
        let s = &self.data.synth.session;
        if (s.fps - self.model.fps).abs() > 1e-9 || (s.radar.chirp_rate - self.model.rf_rate).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "synthesized rates ({} fps, {} Hz) differ from the model's ({} fps, {} Hz)",
                s.fps, s.radar.chirp_rate, self.model.fps, self.model.rf_rate
            )));
        }
        if 2 * s.radar.roi_bins() != self.model.rf_channels {
            return Err(Error::Config(format!(
                "model.rf_channels = {} but the radar ROI yields {} channels",
                self.model.rf_channels,
                2 * s.radar.roi_bins()
            )));
        }
        Ok(())
    }
}
