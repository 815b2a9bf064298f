//! Paired RGB + radar sessions: synthesis, storage and subject-level splits.

mod io;
mod radar;
mod split;

pub use io::{load_dataset, load_session, save_session, session_dir, RfKind, SessionMeta, FORMAT_VERSION};
pub use radar::{rf_range_matrix, simulate_iq, unwrap, RadarParams, RangeMatrix, Reflector, RfRepr};
pub use split::{split_dataset, Folds, SplitScheme};

pub use crate::losses::SkinTone;

use std::f64::consts::PI;

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{RfSeries, VideoClip};
use crate::error::{Error, Result};
use crate::losses::{BvpSignal, DEFAULT_HR_BAND};

/// One recording. Arrays are kept in `f32`, the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub subject: String,
    pub skin_tone: SkinTone,
    pub fps: f64,
    pub rf_rate: f64,
    /// `[3, T, H, W]`, intensities in `[0, 1]`.
    pub video: Array4<f32>,
    /// `[C, T_rf]`.
    pub rf: Array2<f32>,
    /// Ground-truth pulse at the video frame rate.
    pub ppg: Vec<f32>,
}

impl Session {
    pub fn frames(&self) -> usize {
        self.video.shape()[1]
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    /// Durations of all three streams agree within one frame period, and
    /// the pulse has one sample per frame.
    pub fn validate(&self) -> Result<()> {
        let v = self.video.shape();
        if v[0] != 3 || v[1] < 5 {
            return Err(Error::shape(format!("video must be [3, T>=5, H, W], got {v:?}")));
        }
        if !(self.fps > 0.0 && self.rf_rate > 0.0) {
            return Err(Error::input("rates must be positive"));
        }
        if self.ppg.len() != v[1] {
            return Err(Error::shape(format!(
                "{} pulse samples for {} frames",
                self.ppg.len(),
                v[1]
            )));
        }
        let rf_secs = self.rf.shape()[1] as f64 / self.rf_rate;
        if (rf_secs - self.duration()).abs() > 1.0 / self.fps + 1e-9 {
            return Err(Error::input(format!(
                "radar covers {rf_secs:.3} s, video {:.3} s",
                self.duration()
            )));
        }
        let finite = self.video.iter().chain(self.rf.iter()).chain(&self.ppg).all(|v| v.is_finite());
        if !finite {
            return Err(Error::input("non-finite sample"));
        }
        Ok(())
    }

    pub fn ppg_signal(&self) -> Result<BvpSignal> {
        BvpSignal::new(self.ppg.iter().map(|&v| v as f64).collect(), self.fps)
    }

    /// Frames `[start, start + len)` as a single-item batch, with the radar
    /// samples covering the same interval.
    pub fn window(&self, start: usize, len: usize) -> Result<(VideoClip, RfSeries, Vec<f64>)> {
        let ratio = self.rf_rate / self.fps;
        let rf_start = (start as f64 * ratio).round() as usize;
        let rf_len = (len as f64 * ratio).round() as usize;
        if start + len > self.frames() || rf_start + rf_len > self.rf.shape()[1] {
            return Err(Error::input(format!(
                "window {start}+{len} exceeds session {} ({} frames)",
                self.session_id,
                self.frames()
            )));
        }
        let video = self.video.slice(ndarray::s![.., start..start + len, .., ..]);
        let video = video.insert_axis(Axis(0)).mapv(|v| v as f64).into_dyn();
        let rf = self.rf.slice(ndarray::s![.., rf_start..rf_start + rf_len]);
        let rf = rf.insert_axis(Axis(0)).mapv(|v| v as f64).into_dyn();
        let ppg = self.ppg[start..start + len].iter().map(|&v| v as f64).collect();
        Ok((VideoClip::new(video, self.fps)?, RfSeries::new(rf, self.rf_rate)?, ppg))
    }

    pub fn full(&self) -> Result<(VideoClip, RfSeries, Vec<f64>)> {
        self.window(0, self.frames())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub hr_bpm: f64,
    /// Peak deviation of a slow sinusoidal HR drift (0 for a constant rate).
    pub hr_variation_bpm: f64,
    pub resp_bpm: f64,
    /// Fractional intensity modulation of skin pixels.
    pub pulse_amplitude: f64,
    /// `[x0, y0, x1, y1]` as fractions of the frame.
    pub skin_region: [f64; 4],
    pub video_noise: f64,
    pub rf_noise: f64,
    pub illumination_drift: f64,
    pub chest_heart_mm: f64,
    pub chest_resp_mm: f64,
    pub chest_range_m: f64,
    pub radar: RadarParams,
    pub rf_repr: RfRepr,
    pub skin_tone: SkinTone,
    /// 0 gives all tones identical pulse contrast; 1 gives dark skin 20% of
    /// the light-skin pulse amplitude at half the luminance.
    pub tone_bias: f64,
    pub duration_s: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    /// Seed for the static face texture (shared by a subject's sessions).
    pub texture_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            hr_variation_bpm: 0.0,
            resp_bpm: 15.0,
            pulse_amplitude: 0.03,
            skin_region: [0.2, 0.15, 0.8, 0.95],
            video_noise: 0.0,
            rf_noise: 0.0,
            illumination_drift: 0.0,
            chest_heart_mm: 0.1,
            chest_resp_mm: 0.5,
            chest_range_m: 0.6,
            radar: RadarParams::default(),
            rf_repr: RfRepr::RealImag,
            skin_tone: SkinTone::Light,
            tone_bias: 0.0,
            duration_s: 10.0,
            fps: 30.0,
            height: 64,
            width: 64,
            texture_seed: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = DEFAULT_HR_BAND;
        let (lo, hi) = (lo * 60.0, hi * 60.0);
        let (min_hr, max_hr) = (self.hr_bpm - self.hr_variation_bpm.abs(), self.hr_bpm + self.hr_variation_bpm.abs());
        if !(min_hr >= lo && max_hr <= hi) {
            return Err(Error::config(format!(
                "heart rate {}±{} bpm outside {lo}-{hi} bpm",
                self.hr_bpm, self.hr_variation_bpm
            )));
        }
        let [x0, y0, x1, y1] = self.skin_region;
        if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
            return Err(Error::config(format!("skin_region {:?} is not a sub-rectangle", self.skin_region)));
        }
        let nonneg = [
            self.pulse_amplitude,
            self.video_noise,
            self.rf_noise,
            self.illumination_drift,
            self.chest_heart_mm,
            self.chest_resp_mm,
            self.resp_bpm,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("amplitudes, noise levels and rates must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.tone_bias) {
            return Err(Error::config(format!("tone_bias must be in [0, 1], got {}", self.tone_bias)));
        }
        if !(self.fps > 0.0 && self.duration_s * self.fps >= 5.0) || self.height < 8 || self.width < 8 {
            return Err(Error::config("need fps > 0, at least 5 frames and frames of at least 8x8"));
        }
        if self.chest_range_m <= 0.0 || self.chest_range_m >= self.radar.range_bins() as f64 * self.radar.bin_spacing() {
            return Err(Error::config("chest range outside the radar's unambiguous range"));
        }
        self.radar.validate()
    }

    fn tone_level(&self) -> f64 {
        match self.skin_tone {
            SkinTone::Light => 0.0,
            SkinTone::Medium => 0.5,
            SkinTone::Dark => 1.0,
        }
    }

    /// Skin luminance and fractional pulse amplitude after the tone knob.
    fn tone_effect(&self) -> (f64, f64) {
        let k = self.tone_bias * self.tone_level();
        (0.7 * (1.0 - 0.5 * k), self.pulse_amplitude * (1.0 - 0.8 * k))
    }
}

/// Instantaneous HR phase `φ(t) = 2π ∫ hr(t)/60 dt`, with a drift period of
/// 20 s when `hr_variation_bpm` is non-zero.
fn cardiac_phase(cfg: &SynthConfig, t: f64, offset: f64) -> f64 {
    let f = cfg.hr_bpm / 60.0;
    let dev = cfg.hr_variation_bpm / 60.0;
    let period = 20.0;
    2.0 * PI * (f * t + dev * period / (2.0 * PI) * (1.0 - (2.0 * PI * t / period).cos())) + offset
}

/// Clean pulse shape: fundamental plus a weaker second harmonic.
fn pulse(phase: f64) -> f64 {
    (phase.sin() + 0.25 * (2.0 * phase + 0.8).sin()) / 1.25
}

struct Face {
    base: Array2<f64>,
    skin: Array2<bool>,
}

fn face(cfg: &SynthConfig, luminance: f64) -> Face {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.01..0.04)))
        .collect();
    let (cx, cy) = (0.5 + rng.gen_range(-0.04..0.04), 0.55 + rng.gen_range(-0.04..0.04));
    let [x0, y0, x1, y1] = cfg.skin_region;
    let mut base = Array2::zeros((h, w));
    let mut skin = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let texture: f64 = waves.iter().map(|(a, b, p, amp)| amp * (2.0 * PI * (a * u + b * v) + p).sin()).sum();
            let inside = ((u - cx) / 0.3).powi(2) + ((v - cy) / 0.4).powi(2) <= 1.0;
            let eye = [cx - 0.12, cx + 0.12]
                .iter()
                .any(|ex| ((u - ex) / 0.06).powi(2) + ((v - cy + 0.1) / 0.03).powi(2) <= 1.0);
            let value = if inside && !eye {
                skin[[y, x]] = (x0..=x1).contains(&u) && (y0..=y1).contains(&v);
                luminance + texture
            } else if eye {
                0.15 + texture
            } else {
                0.35 + 0.5 * texture
            };
            base[[y, x]] = value;
        }
    }
    Face { base, skin }
}

/// Per-channel skin reflectance and pulse sensitivity (green strongest).
const SKIN_TINT: [f64; 3] = [1.0, 0.78, 0.62];
const PULSE_GAIN: [f64; 3] = [0.35, 1.0, 0.5];

pub fn synth_session(cfg: &SynthConfig, subject: &str, session_id: &str) -> Result<Session> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames = (cfg.duration_s * cfg.fps).round() as usize;
    let rf_rate = cfg.radar.chirp_rate;
    let chirps = (frames as f64 / cfg.fps * rf_rate).round() as usize;
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let resp0 = rng.gen_range(0.0..2.0 * PI);
    let drift0 = rng.gen_range(0.0..2.0 * PI);

    let (luminance, amplitude) = cfg.tone_effect();
    let Face { base, skin } = face(cfg, luminance);
    let (h, w) = (cfg.height, cfg.width);
    let ppg: Vec<f64> = (0..frames).map(|i| pulse(cardiac_phase(cfg, i as f64 / cfg.fps, phase0))).collect();
    let mut video = Array4::<f32>::zeros((3, frames, h, w));
    for t in 0..frames {
        let secs = t as f64 / cfg.fps;
        let light = 1.0 + cfg.illumination_drift * (2.0 * PI * 0.05 * secs + drift0).sin();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut v = base[[y, x]];
                    if skin[[y, x]] {
                        v *= SKIN_TINT[c] * (1.0 + amplitude * PULSE_GAIN[c] * ppg[t]);
                    }
                    v *= light;
                    if cfg.video_noise > 0.0 {
                        v += cfg.video_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    video[[c, t, y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let displacement: Vec<f64> = (0..chirps)
        .map(|i| {
            let secs = i as f64 / rf_rate;
            let heart = cfg.chest_heart_mm * cardiac_phase(cfg, secs, phase0).sin();
            let resp = cfg.chest_resp_mm * (2.0 * PI * cfg.resp_bpm / 60.0 * secs + resp0).sin();
            (heart + resp) * 1e-3
        })
        .collect();
    let reflectors = [
        Reflector {
            range_m: cfg.chest_range_m,
            amplitude: 1.0,
            displacement,
        },
        Reflector {
            range_m: cfg.chest_range_m + 0.5,
            amplitude: 0.2,
            displacement: Vec::new(),
        },
    ];
    let sigma = cfg.rf_noise;
    let iq = simulate_iq(&cfg.radar, chirps, &reflectors, || {
        if sigma > 0.0 {
            (sigma * rng.sample::<f64, _>(StandardNormal), sigma * rng.sample::<f64, _>(StandardNormal))
        } else {
            (0.0, 0.0)
        }
    });
    let range = rf_range_matrix(&iq, &cfg.radar)?;
    let rf = range.features(cfg.rf_repr).mapv(|v| v as f32);

    let session = Session {
        session_id: session_id.to_string(),
        subject: subject.to_string(),
        skin_tone: cfg.skin_tone,
        fps: cfg.fps,
        rf_rate,
        video,
        rf,
        ppg: ppg.iter().map(|&v| v as f32).collect(),
    };
    session.validate()?;
    Ok(session)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub subjects: usize,
    pub sessions_per_subject: usize,
    /// Per-session HR is drawn uniformly from this range.
    pub hr_range_bpm: [f64; 2],
    /// Skin tones are assigned to subjects in this repeating order.
    pub tone_cycle: Vec<SkinTone>,
    pub session: SynthConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            subjects: 12,
            sessions_per_subject: 2,
            hr_range_bpm: [60.0, 100.0],
            tone_cycle: SkinTone::ALL.to_vec(),
            session: SynthConfig::default(),
            seed: 0,
        }
    }
}

pub fn subject_name(i: usize) -> String {
    format!("subject{:02}", i + 1)
}

/// Sessions in subject-major order; fully determined by the config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Session>> {
    let [lo, hi] = cfg.hr_range_bpm;
    if !(lo <= hi) || cfg.subjects == 0 || cfg.sessions_per_subject == 0 || cfg.tone_cycle.is_empty() {
        return Err(Error::config("dataset needs subjects, sessions, tones and lo <= hi"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plans = Vec::new();
    for s in 0..cfg.subjects {
        let texture_seed = rng.gen();
        for k in 0..cfg.sessions_per_subject {
            let mut sc = cfg.session.clone();
            sc.skin_tone = cfg.tone_cycle[s % cfg.tone_cycle.len()];
            sc.hr_bpm = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            sc.texture_seed = texture_seed;
            sc.seed = rng.gen();
            plans.push((sc, subject_name(s), format!("{}_s{}", subject_name(s), k + 1)));
        }
    }
    use rayon::prelude::*;
    plans.par_iter().map(|(sc, subj, id)| synth_session(sc, subj, id)).collect()
}

/// Spatial mean of the green channel over skin pixels, per frame.
pub fn skin_trace(session: &Session, region: [f64; 4]) -> Vec<f64> {
    let (h, w) = (session.video.shape()[2], session.video.shape()[3]);
    let [x0, y0, x1, y1] = region;
    let xs = ((x0 * w as f64) as usize)..((x1 * w as f64) as usize).min(w);
    let ys = ((y0 * h as f64) as usize)..((y1 * h as f64) as usize).min(h);
    (0..session.frames())
        .map(|t| {
            let block = session.video.slice(ndarray::s![1, t, ys.clone(), xs.clone()]);
            block.iter().map(|&v| v as f64).sum::<f64>() / block.len().max(1) as f64
        })
        .collect()
}
