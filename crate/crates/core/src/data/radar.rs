//! FMCW radar front end: beat-signal IQ in, complex range matrix and
//! region-of-interest features out.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarParams {
    pub carrier_hz: f64,
    /// Sweep bandwidth; sets the range resolution `c / 2B`.
    pub bandwidth_hz: f64,
    pub samples_per_chirp: usize,
    /// Slow-time rate (chirps per second).
    pub chirp_rate: f64,
    pub roi_width_m: f64,
    /// Minimum peak / median ratio of the static range profile.
    pub detection_threshold: f64,
}

impl Default for RadarParams {
    fn default() -> Self {
        Self {
            carrier_hz: 77e9,
            bandwidth_hz: 4e9,
            samples_per_chirp: 64,
            chirp_rate: 60.0,
            roi_width_m: 0.25,
            detection_threshold: 6.0,
        }
    }
}

impl RadarParams {
    pub fn bin_spacing(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn range_bins(&self) -> usize {
        self.samples_per_chirp / 2
    }

    /// Odd bin count closest to the ROI width, so the window has a centre bin.
    pub fn roi_bins(&self) -> usize {
        let n = (self.roi_width_m / self.bin_spacing()).round().max(1.0) as usize;
        if n % 2 == 0 {
            n + 1
        } else {
            n
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.carrier_hz > 0.0
            && self.bandwidth_hz > 0.0
            && self.chirp_rate > 0.0
            && self.roi_width_m > 0.0
            && self.detection_threshold > 1.0
            && self.samples_per_chirp >= 8
            && self.samples_per_chirp.is_power_of_two();
        if !ok {
            return Err(Error::config(format!("invalid radar parameters {self:?}")));
        }
        if self.roi_bins() > self.range_bins() {
            return Err(Error::config("ROI wider than the range axis"));
        }
        Ok(())
    }
}

/// How ROI bins become real-valued channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfRepr {
    #[default]
    RealImag,
    MagPhase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeMatrix {
    /// `[range bins, chirps]`.
    pub data: Array2<Complex64>,
    pub bin_spacing: f64,
    pub roi: std::ops::Range<usize>,
}

/// Raw IQ is `[chirps, samples_per_chirp, 2]` (I, Q).
pub fn rf_range_matrix(iq: &Array3<f64>, params: &RadarParams) -> Result<RangeMatrix> {
    params.validate()?;
    let (chirps, ns, two) = iq.dim();
    if ns != params.samples_per_chirp || two != 2 {
        return Err(Error::shape(format!(
            "IQ block {:?} does not match {} samples per chirp",
            iq.shape(),
            params.samples_per_chirp
        )));
    }
    if chirps == 0 {
        return Err(Error::input("no chirps"));
    }
    let bins = params.range_bins();
    let window: Vec<f64> = (0..ns).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / ns as f64).cos()).collect();
    let fft = FftPlanner::new().plan_fft_forward(ns);
    let mut data = Array2::zeros((bins, chirps));
    let mut buf = vec![Complex64::new(0.0, 0.0); ns];
    for c in 0..chirps {
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(iq[[c, n, 0]], iq[[c, n, 1]]) * window[n];
        }
        fft.process(&mut buf);
        for k in 0..bins {
            data[[k, c]] = buf[k] / ns as f64;
        }
    }
    // Static profile: coherent mean over slow time, DC bin excluded.
    let profile: Vec<f64> = (0..bins)
        .map(|k| if k == 0 { 0.0 } else { data.row(k).mean().map_or(0.0, |m| m.norm()) })
        .collect();
    let (peak, peak_mag) = profile
        .iter()
        .copied()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least 4 bins");
    let mut sorted = profile[1..].to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let ratio = if median > 0.0 { peak_mag / median } else if peak_mag > 0.0 { f64::INFINITY } else { 0.0 };
    if !(ratio >= params.detection_threshold) {
        return Err(Error::RoiDetection {
            ratio,
            threshold: params.detection_threshold,
        });
    }
    let width = params.roi_bins();
    let start = peak.saturating_sub(width / 2).min(bins - width);
    Ok(RangeMatrix {
        data,
        bin_spacing: params.bin_spacing(),
        roi: start..start + width,
    })
}

impl RangeMatrix {
    /// `[2 * roi bins, chirps]`, scaled by the strongest ROI bin's mean
    /// magnitude. Phases are unwrapped along slow time and centred.
    pub fn features(&self, repr: RfRepr) -> Array2<f64> {
        let roi = self.data.slice(s![self.roi.clone(), ..]);
        let (bins, chirps) = roi.dim();
        let scale = roi
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.norm()).sum::<f64>() / chirps as f64)
            .fold(0.0, f64::max);
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut out = Array2::zeros((2 * bins, chirps));
        for (b, row) in roi.rows().into_iter().enumerate() {
            match repr {
                RfRepr::RealImag => {
                    for (t, v) in row.iter().enumerate() {
                        out[[2 * b, t]] = v.re / scale;
                        out[[2 * b + 1, t]] = v.im / scale;
                    }
                }
                RfRepr::MagPhase => {
                    let phase = unwrap(&row.iter().map(|v| v.arg()).collect::<Vec<_>>());
                    let mean = phase.iter().sum::<f64>() / chirps as f64;
                    for (t, v) in row.iter().enumerate() {
                        out[[2 * b, t]] = v.norm() / scale;
                        out[[2 * b + 1, t]] = phase[t] - mean;
                    }
                }
            }
        }
        out
    }

    /// Unwrapped phase of one range bin over slow time.
    pub fn phase(&self, bin: usize) -> Vec<f64> {
        unwrap(&self.data.row(bin).iter().map(|v| v.arg()).collect::<Vec<_>>())
    }
}

pub fn unwrap(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let d = p - phase[i - 1];
            if d > PI {
                offset -= 2.0 * PI;
            } else if d < -PI {
                offset += 2.0 * PI;
            }
        }
        out.push(p + offset);
    }
    out
}

/// One point reflector for the simulator.
#[derive(Debug, Clone)]
pub struct Reflector {
    pub range_m: f64,
    pub amplitude: f64,
    /// Displacement along the line of sight per chirp (m); empty means static.
    pub displacement: Vec<f64>,
}

/// Phase-domain beat-signal model: each reflector contributes a tone at its
/// range bin whose phase carries `4π (r + d(t)) / λ`.
pub fn simulate_iq(
    params: &RadarParams,
    chirps: usize,
    reflectors: &[Reflector],
    noise: impl FnMut() -> (f64, f64),
) -> Array3<f64> {
    let mut noise = noise;
    let ns = params.samples_per_chirp;
    let lambda = params.wavelength();
    let dr = params.bin_spacing();
    let mut iq = Array3::zeros((chirps, ns, 2));
    for c in 0..chirps {
        for n in 0..ns {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in reflectors {
                let d = r.displacement.get(c).copied().unwrap_or(0.0);
                let beat = 2.0 * PI * (r.range_m / dr) * n as f64 / ns as f64;
                let carrier = 4.0 * PI * (r.range_m + d) / lambda;
                acc += Complex64::from_polar(r.amplitude, beat + carrier);
            }
            let (ni, nq) = noise();
            iq[[c, n, 0]] = acc.re + ni;
            iq[[c, n, 1]] = acc.im + nq;
        }
    }
    iq
}
