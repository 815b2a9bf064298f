use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 36 to 198 bpm.
pub const DEFAULT_HR_BAND: [f64; 2] = [0.6, 3.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSignal {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl BvpSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::input(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite pulse sample"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

/// Dominant in-band frequency of the periodogram in beats per minute.
///
/// The mean is removed and the signal zero-padded to at least 8x its length
/// (and 4096 points) before the FFT; the peak bin is refined with a parabola
/// through its neighbours.
pub fn estimate_hr(bvp: &BvpSignal, band: [f64; 2]) -> Result<f64> {
    let fs = bvp.sample_rate;
    let [lo, hi] = band;
    if !(lo >= 0.0 && lo < hi) || hi > fs / 2.0 {
        return Err(Error::config(format!(
            "band {lo}..{hi} Hz invalid for sample rate {fs} Hz"
        )));
    }
    let x = &bvp.samples;
    if bvp.duration() < 2.0 {
        return Err(Error::input(format!(
            "need at least 2 s of samples, got {:.3} s",
            bvp.duration()
        )));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let nfft = (8 * x.len()).max(4096).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let res = fs / nfft as f64;
    let k0 = (lo / res).ceil() as usize;
    let k1 = ((hi / res).floor() as usize).min(nfft / 2);
    let power = |k: usize| buf[k].norm_sqr();
    let (peak, peak_power) = (k0..=k1)
        .map(|k| (k, power(k)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::NoPeak { lo_hz: lo, hi_hz: hi })?;
    if !(peak_power > 1e-20 * x.len() as f64 * energy) || peak_power == 0.0 {
        return Err(Error::NoPeak { lo_hz: lo, hi_hz: hi });
    }
    let mut f = peak as f64;
    if peak > k0 && peak < k1 {
        let (a, b, c) = (power(peak - 1), peak_power, power(peak + 1));
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            f += (0.5 * (a - c) / den).clamp(-0.5, 0.5);
        }
    }
    Ok(60.0 * f * res)
}
