//! Modality-specific feature blocks.

mod diff;
mod rf;
mod rgb;

pub use diff::{temporal_diff, Boundary, DIFF_OFFSETS};
pub use rf::{channel_attention, rfam_forward, tdmm_forward, ChannelAttention, Rfam, Tdmm};
pub use rgb::{bdcf_forward, scfm_forward, scfm_mask, Bdcf, Scfm};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Batched RGB clip `[B, 3, T, H, W]` with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    data: Array,
    fps: f64,
}

impl VideoClip {
    pub fn new(data: Array, fps: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 || s[1] != 3 {
            return Err(Error::shape(format!("video must be [B, 3, T, H, W], got {s:?}")));
        }
        if s[2] < 5 {
            return Err(Error::input(format!("clip needs at least 5 frames, got {}", s[2])));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::param(format!("frame rate must be positive, got {fps}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite pixel value"));
        }
        Ok(Self { data, fps })
    }

    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Batched radar features `[B, C, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfSeries {
    data: Array,
    sample_rate: f64,
}

impl RfSeries {
    pub fn new(data: Array, sample_rate: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("radar series must be [B, C, T], got {s:?}")));
        }
        if s[2] < 5 {
            return Err(Error::input(format!("radar series needs at least 5 samples, got {}", s[2])));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::param(format!("sample rate must be positive, got {sample_rate}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite radar sample"));
        }
        Ok(Self { data, sample_rate })
    }

    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[2]
    }
}
