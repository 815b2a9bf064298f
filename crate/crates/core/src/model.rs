//! The full two-branch network and its ablation switches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamStore, Var};
use crate::blocks::{bdcf_forward, rfam_forward, scfm_forward, tdmm_forward, Bdcf, Boundary, Rfam, Scfm, Tdmm};
use crate::error::{Error, Result};
use crate::fusion::{cfft_forward, fuse_and_predict, interact_shared, Cfft, Positional, Predictor, SharedInteraction};
use crate::ssm::GateActivation;

/// Module switches; all on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub vim: bool,
    pub cfft: bool,
    pub shared_ssm: bool,
    pub rfam: bool,
    pub tdmm: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            vim: true,
            cfft: true,
            shared_ssm: true,
            rfam: true,
            tdmm: true,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 5] = ["vim", "cfft", "shared_ssm", "rfam", "tdmm"];

    pub fn get(&self, name: &str) -> Option<bool> {
        Some(match name {
            "vim" => self.vim,
            "cfft" => self.cfft,
            "shared_ssm" => self.shared_ssm,
            "rfam" => self.rfam,
            "tdmm" => self.tdmm,
            _ => return None,
        })
    }

    /// All on except `name`.
    pub fn without(name: &str) -> Result<Self> {
        let mut t = Self::default();
        let slot = match name {
            "vim" => &mut t.vim,
            "cfft" => &mut t.cfft,
            "shared_ssm" => &mut t.shared_ssm,
            "rfam" => &mut t.rfam,
            "tdmm" => &mut t.tdmm,
            other => {
                return Err(Error::config(format!(
                    "unknown toggle {other:?} (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *slot = false;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Both,
    RgbOnly,
    RfOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Both, Modality::RgbOnly, Modality::RfOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::RgbOnly => "rgb_only",
            Modality::RfOnly => "rf_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown modality {s:?} (expected both, rgb_only or rf_only)")))
    }

    pub fn uses_rgb(self) -> bool {
        self != Modality::RfOnly
    }

    pub fn uses_rf(self) -> bool {
        self != Modality::RgbOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Stem channels of the RGB branch.
    pub rgb_channels: usize,
    /// Radar input channels (two per ROI bin).
    pub rf_channels: usize,
    /// Token width shared by both streams after alignment.
    pub width: usize,
    pub state_size: usize,
    pub tdmm_blocks: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gate: GateActivation,
    pub positional: Positional,
    pub max_tokens: usize,
    pub boundary: Boundary,
    pub cfft_relu: bool,
    pub fps: f64,
    pub rf_rate: f64,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rgb_channels: 4,
            rf_channels: 14,
            width: 16,
            state_size: 16,
            tdmm_blocks: 2,
            alpha: 0.5,
            beta: 0.5,
            gate: GateActivation::Sigmoid,
            positional: Positional::Learned,
            max_tokens: 512,
            boundary: Boundary::Clamp,
            cfft_relu: true,
            fps: 30.0,
            rf_rate: 60.0,
            toggles: Toggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    bdcf: Bdcf,
    scfm: Scfm,
    tdmm: Tdmm,
    rfam: [Rfam; 2],
    interaction: SharedInteraction,
    cfft: [Cfft; 2],
    head: Predictor,
}

impl Model {
    /// Fails unless two radar samples arrive per video frame, which makes the
    /// radar token rate (`T2/4`) equal the video token rate (`T1/2`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = &config;
        if !(c.fps > 0.0 && c.rf_rate > 0.0) || (c.rf_rate / 4.0 - c.fps / 2.0).abs() > 1e-9 * c.fps {
            return Err(Error::config(format!(
                "radar rate {} Hz / 4 must equal video rate {} Hz / 2 for token alignment",
                c.rf_rate, c.fps
            )));
        }
        if c.rgb_channels == 0 || c.rf_channels == 0 || c.width < 4 || c.state_size == 0 || c.max_tokens == 0 {
            return Err(Error::config("model widths must be positive (token width at least 4)"));
        }
        let mut bdcf = Bdcf::new("bdcf", c.rgb_channels);
        bdcf.alpha = c.alpha;
        bdcf.beta = c.beta;
        bdcf.boundary = c.boundary;
        let mut tdmm = Tdmm::new("tdmm", c.rf_channels, c.tdmm_blocks, c.state_size);
        tdmm.gate = c.gate;
        tdmm.boundary = c.boundary;
        let mut interaction = SharedInteraction::new("mix", c.width, c.state_size, c.max_tokens, c.toggles.shared_ssm)
            .with_gate(c.gate)
            .with_positional(c.positional);
        interaction.encode = c.toggles.vim;
        let cfft = ["cfft.rgb", "cfft.rf"].map(|name| {
            let mut f = Cfft::new(name, c.width);
            f.bypass = !c.toggles.cfft;
            f.relu = c.cfft_relu;
            f
        });
        Ok(Self {
            config,
            bdcf,
            scfm: Scfm::new("scfm", c.rgb_channels, c.width),
            tdmm,
            rfam: [Rfam::new("rfam.0", c.rf_channels, c.width), Rfam::new("rfam.1", c.width, c.width)],
            interaction,
            cfft,
            head: Predictor::new("head", c.width),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = &self.config;
        self.bdcf.init(store, rng);
        self.scfm.init(store, rng);
        if c.toggles.tdmm {
            self.tdmm.init(store, rng)?;
        } else {
            let k = self.tdmm.kernel;
            let bound = (6.0 / (c.rf_channels * k) as f64).sqrt();
            store.uniform("rf_stem.conv.w", &[c.rf_channels, c.rf_channels, k], bound, rng);
            store.batch_norm("rf_stem.bn", c.rf_channels);
        }
        if c.toggles.rfam {
            for r in &self.rfam {
                r.init(store, rng);
            }
        } else {
            store.uniform("rf_proj.w", &[c.rf_channels, c.width], 1.0 / (c.rf_channels as f64).sqrt(), rng);
            store.zeros("rf_proj.b", &[c.width]);
        }
        self.interaction.init(store, rng)?;
        for f in &self.cfft {
            f.init(store, rng);
        }
        self.head.init(store, rng);
        Ok(())
    }

    pub fn init_store(&self, seed: u64) -> Result<ParamStore> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        self.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
        Ok(store)
    }

    /// Video `[B, 3, T, H, W]` and radar `[B, C_rf, 2T]` → BVP `[B, T]`.
    pub fn forward(&self, b: &Binder, video: Var, rf: Var) -> Result<Var> {
        let g = b.graph;
        let (vs, rs) = (g.shape(video), g.shape(rf));
        if vs.len() != 5 || rs.len() != 3 || vs[0] != rs[0] {
            return Err(Error::shape(format!("video {vs:?} and radar {rs:?} are not a batch pair")));
        }
        if vs[2] % 2 != 0 || rs[2] != 2 * vs[2] {
            return Err(Error::shape(format!(
                "need an even frame count and two radar samples per frame, got T1 = {}, T2 = {}",
                vs[2], rs[2]
            )));
        }
        let hc = scfm_forward(b, bdcf_forward(b, video, &self.bdcf)?, &self.scfm)?;
        let hf = self.radar_branch(b, rf)?;
        let (hc4, hf4) = interact_shared(b, hc, hf, &self.interaction)?;
        let hc5 = cfft_forward(b, hc4, &self.cfft[0])?;
        let hf5 = cfft_forward(b, hf4, &self.cfft[1])?;
        fuse_and_predict(b, hc5, hf5, &self.head)
    }

    fn radar_branch(&self, b: &Binder, rf: Var) -> Result<Var> {
        let g = b.graph;
        let c = &self.config;
        let h = if c.toggles.tdmm {
            tdmm_forward(b, rf, &self.tdmm)?
        } else {
            let k = self.tdmm.kernel;
            let y = g.conv1d(rf, b.param("rf_stem.conv.w")?, k / 2, k - 1 - k / 2, 1)?;
            g.relu(b.batch_norm("rf_stem.bn", y, 1)?)
        };
        if c.toggles.rfam {
            let h = rfam_forward(b, h, &self.rfam[0])?;
            rfam_forward(b, h, &self.rfam[1])
        } else {
            let h = g.avg_pool_axis(h, 2, 4)?;
            let h = g.permute(h, &[0, 2, 1])?;
            let h = g.linear(h, b.param("rf_proj.w")?, Some(b.param("rf_proj.b")?))?;
            g.permute(h, &[0, 2, 1])
        }
    }
}
