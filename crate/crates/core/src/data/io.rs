//! On-disk session layout:
//!
//! ```text
//! <root>/<subject>/<session>/video.f32   [3, T, H, W]
//!                            rf.f32      [C, T_rf] features, or raw IQ
//!                            ppg.f32     [T]
//!                            meta.txt    TOML descriptor (SessionMeta)
//! ```
//!
//! Arrays are little-endian `f32`, row-major, with shapes taken from
//! `meta.txt`.
//!
//! Recordings that ship raw radar IQ (the public multimodal release is
//! assumed to: one complex sample block per chirp) set `rf_kind = "iq"`,
//! store `rf.f32` as `[chirps, samples_per_chirp, 2]` and give the chirp
//! configuration under `[radar]`; the loader then runs the range-matrix
//! front end. Only this adapter path depends on that assumed layout.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::radar::{rf_range_matrix, RadarParams, RfRepr};
use super::{Session, SkinTone};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfKind {
    #[default]
    Features,
    Iq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub format_version: u32,
    pub session_id: String,
    pub subject: String,
    pub skin_tone: SkinTone,
    pub fps: f64,
    pub rf_rate: f64,
    pub duration_s: f64,
    pub video_shape: [usize; 4],
    pub rf_shape: Vec<usize>,
    pub ppg_shape: [usize; 1],
    #[serde(default)]
    pub rf_kind: RfKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radar: Option<RadarParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rf_repr: Option<RfRepr>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.len() != expect * 4 {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            reason: format!("{} bytes, declared shape needs {}", bytes.len(), expect * 4),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn session_dir(root: &Path, session: &Session) -> PathBuf {
    root.join(&session.subject).join(&session.session_id)
}

/// Writes the session under `root` and returns its directory.
pub fn save_session(root: &Path, session: &Session) -> Result<PathBuf> {
    session.validate()?;
    let dir = session_dir(root, session);
    fs::create_dir_all(&dir)?;
    let v = session.video.shape();
    let meta = SessionMeta {
        format_version: FORMAT_VERSION,
        session_id: session.session_id.clone(),
        subject: session.subject.clone(),
        skin_tone: session.skin_tone,
        fps: session.fps,
        rf_rate: session.rf_rate,
        duration_s: session.duration(),
        video_shape: [v[0], v[1], v[2], v[3]],
        rf_shape: session.rf.shape().to_vec(),
        ppg_shape: [session.ppg.len()],
        rf_kind: RfKind::Features,
        radar: None,
        rf_repr: None,
    };
    write_f32(&dir.join("video.f32"), session.video.iter().copied())?;
    write_f32(&dir.join("rf.f32"), session.rf.iter().copied())?;
    write_f32(&dir.join("ppg.f32"), session.ppg.iter().copied())?;
    let text = toml::to_string(&meta).map_err(|e| Error::config(e.to_string()))?;
    fs::write(dir.join("meta.txt"), text)?;
    Ok(dir)
}

fn schema(path: &Path, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_session(dir: &Path) -> Result<Session> {
    let meta_path = dir.join("meta.txt");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::Load {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let meta: SessionMeta = toml::from_str(&text).map_err(|e| schema(&meta_path, e.message()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(schema(
            &meta_path,
            format!("format_version {} (expected {FORMAT_VERSION})", meta.format_version),
        ));
    }
    if meta.ppg_shape[0] != meta.video_shape[1] {
        return Err(schema(&meta_path, "ppg_shape must equal the frame count"));
    }
    let count = |s: &[usize]| s.iter().product::<usize>();
    let video = read_f32(&dir.join("video.f32"), count(&meta.video_shape))?;
    let video = Array4::from_shape_vec(meta.video_shape, video).map_err(|e| schema(&meta_path, e.to_string()))?;
    let rf_path = dir.join("rf.f32");
    let rf_raw = read_f32(&rf_path, count(&meta.rf_shape))?;
    let rf = match meta.rf_kind {
        RfKind::Features => {
            let [c, t] = meta.rf_shape[..] else {
                return Err(schema(&meta_path, "rf_shape must be [channels, samples]"));
            };
            Array2::from_shape_vec((c, t), rf_raw).map_err(|e| schema(&meta_path, e.to_string()))?
        }
        RfKind::Iq => {
            let [chirps, ns, two] = meta.rf_shape[..] else {
                return Err(schema(&meta_path, "IQ rf_shape must be [chirps, samples, 2]"));
            };
            let radar = meta.radar.ok_or_else(|| schema(&meta_path, "IQ sessions need a [radar] table"))?;
            let iq = Array3::from_shape_vec((chirps, ns, two), rf_raw.into_iter().map(f64::from).collect())
                .map_err(|e| schema(&meta_path, e.to_string()))?;
            let range = rf_range_matrix(&iq, &radar)?;
            range.features(meta.rf_repr.unwrap_or_default()).mapv(|v| v as f32)
        }
    };
    let ppg = read_f32(&dir.join("ppg.f32"), meta.ppg_shape[0])?;
    let session = Session {
        session_id: meta.session_id,
        subject: meta.subject,
        skin_tone: meta.skin_tone,
        fps: meta.fps,
        rf_rate: meta.rf_rate,
        video,
        rf,
        ppg,
    };
    session.validate().map_err(|e| schema(&meta_path, e.to_string()))?;
    if (session.duration() - meta.duration_s).abs() > 1.0 / session.fps + 1e-9 {
        return Err(schema(&meta_path, "duration_s disagrees with the frame count"));
    }
    Ok(session)
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Every `<subject>/<session>` directory holding a `meta.txt`, in sorted
/// order.
pub fn load_dataset(root: &Path) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for subject in sorted_dirs(root)? {
        for session in sorted_dirs(&subject)? {
            if session.join("meta.txt").is_file() {
                out.push(load_session(&session)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            reason: "no sessions found".into(),
        });
    }
    Ok(out)
}
