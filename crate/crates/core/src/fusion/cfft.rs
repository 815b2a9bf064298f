//! Per-bin complex-affine interaction in the channel-frequency domain.
//!
//! The real DFT over channels is expressed as two constant `C × K` matrices
//! (`K = ⌊C/2⌋ + 1`) and the inverse as two `K × C` matrices, so the whole
//! block is matmuls and elementwise ops on the tape.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Array, Binder, Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub fn bins(width: usize) -> usize {
    width / 2 + 1
}

/// Forward real-DFT matrices: `re = x·F_re`, `im = x·F_im` for row vectors
/// `x` of length `width`.
pub fn forward_matrices(width: usize) -> (Array, Array) {
    let k = bins(width);
    let angle = |n: usize, b: usize| 2.0 * PI * (n * b % width) as f64 / width as f64;
    let re = Array::from_shape_fn(vec![width, k], |i| angle(i[0], i[1]).cos());
    let im = Array::from_shape_fn(vec![width, k], |i| -angle(i[0], i[1]).sin());
    (re, im)
}

/// Inverse matrices returning the real part of the Hermitian-extended
/// reconstruction: `x = re·G_re + im·G_im`.
pub fn inverse_matrices(width: usize) -> (Array, Array) {
    let k = bins(width);
    let weight = |b: usize| if b == 0 || (width % 2 == 0 && b == width / 2) { 1.0 } else { 2.0 };
    let angle = |b: usize, n: usize| 2.0 * PI * (n * b % width) as f64 / width as f64;
    let scale = 1.0 / width as f64;
    let re = Array::from_shape_fn(vec![k, width], |i| scale * weight(i[0]) * angle(i[0], i[1]).cos());
    let im = Array::from_shape_fn(vec![k, width], |i| -scale * weight(i[0]) * angle(i[0], i[1]).sin());
    (re, im)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cfft {
    pub prefix: String,
    pub width: usize,
    /// Skip the interaction entirely (pure transform round trip).
    pub bypass: bool,
    /// ReLU on both parts after the interaction.
    pub relu: bool,
}

impl Cfft {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        Self {
            prefix: prefix.into(),
            width,
            bypass: false,
            relu: true,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// `r = 1`, `i = 0` and zero biases (plus a small jitter on `r`, `i`).
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        if self.bypass {
            return;
        }
        let k = bins(self.width);
        let jitter = |rng: &mut dyn rand::RngCore, base: f64| {
            Array::from_shape_vec(vec![k], (0..k).map(|_| base + rng.gen_range(-0.02..0.02)).collect())
                .expect("sized")
        };
        store.insert(self.name("r"), jitter(rng, 1.0));
        store.insert(self.name("i"), jitter(rng, 0.0));
        store.zeros(&self.name("r_b"), &[k]);
        store.zeros(&self.name("i_b"), &[k]);
    }
}

/// `[B, C, T]` → `[B, C, T]`: transform across channels at every time step,
/// interact per bin, transform back.
pub fn cfft_forward(b: &Binder, x: Var, p: &Cfft) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != p.width {
        return Err(Error::shape(format!(
            "channel transform of width {} got {shape:?}",
            p.width
        )));
    }
    if p.width < 2 {
        return Err(Error::input("channel transform needs at least 2 channels"));
    }
    let (fre, fim) = forward_matrices(p.width);
    let (ire, iim) = inverse_matrices(p.width);
    let xt = g.permute(x, &[0, 2, 1])?;
    let re = g.matmul(xt, g.constant(fre))?;
    let im = g.matmul(xt, g.constant(fim))?;
    let (hre, him) = if p.bypass {
        (re, im)
    } else {
        interact(b, re, im, p)?
    };
    let y = g.add(g.matmul(hre, g.constant(ire))?, g.matmul(him, g.constant(iim))?)?;
    g.permute(y, &[0, 2, 1])
}

fn interact(b: &Binder, re: Var, im: Var, p: &Cfft) -> Result<(Var, Var)> {
    let g: &Graph = b.graph;
    let r = b.param(&p.name("r"))?;
    let i = b.param(&p.name("i"))?;
    let rb = b.param(&p.name("r_b"))?;
    let ib = b.param(&p.name("i_b"))?;
    let hre = g.add(g.sub(g.mul(re, r)?, g.mul(im, i)?)?, rb)?;
    let him = g.add(g.add(g.mul(im, r)?, g.mul(re, i)?)?, ib)?;
    Ok(if p.relu {
        (g.relu(hre), g.relu(him))
    } else {
        (hre, him)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_params, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Array::from_shape_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParamStore, p: &Cfft, x: &Array) -> Array {
        let g = Graph::new();
        let b = Binder::new(&g, store, false);
        let y = cfft_forward(&b, g.constant(x.clone()), p).unwrap();
        let out = g.value(y).clone();
        out
    }

    #[test]
    fn matrices_match_fft() {
        for width in [2usize, 5, 8, 16] {
            let x = random(&[width], width as u64);
            let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(width).process(&mut buf);
            let (fre, fim) = forward_matrices(width);
            for k in 0..bins(width) {
                let re: f64 = (0..width).map(|n| x[[n]] * fre[[n, k]]).sum();
                let im: f64 = (0..width).map(|n| x[[n]] * fim[[n, k]]).sum();
                assert!((re - buf[k].re).abs() < 1e-12 && (im - buf[k].im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bypass_round_trips_and_conserves_energy() {
        for width in [2usize, 7, 16] {
            let mut p = Cfft::new("cf", width);
            p.bypass = true;
            let store = ParamStore::new();
            let x = random(&[2, width, 5], 3);
            let y = run(&store, &p, &x);
            let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, b) in x.iter().zip(y.iter()) {
                assert!((a - b).abs() <= 1e-6 * scale);
            }
            // Parseval on the channel axis: Σ|x|² = (1/C)·Σ_k w_k |X_k|².
            let (fre, fim) = forward_matrices(width);
            for bt in 0..2 {
                for t in 0..5 {
                    let direct: f64 = (0..width).map(|c| x[[bt, c, t]].powi(2)).sum();
                    let spectral: f64 = (0..bins(width))
                        .map(|k| {
                            let re: f64 = (0..width).map(|c| x[[bt, c, t]] * fre[[c, k]]).sum();
                            let im: f64 = (0..width).map(|c| x[[bt, c, t]] * fim[[c, k]]).sum();
                            let w = if k == 0 || (width % 2 == 0 && k == width / 2) { 1.0 } else { 2.0 };
                            w * (re * re + im * im)
                        })
                        .sum::<f64>()
                        / width as f64;
                    let out: f64 = (0..width).map(|c| y[[bt, c, t]].powi(2)).sum();
                    assert!((direct - spectral).abs() <= 1e-6 * direct);
                    assert!((direct - out).abs() <= 1e-6 * direct);
                }
            }
        }
    }

    #[test]
    fn removing_the_dc_bin_kills_constant_input() {
        let width = 6;
        let mut p = Cfft::new("cf", width);
        p.relu = false;
        let mut store = ParamStore::new();
        p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let k = bins(width);
        let mut r = vec![1.0; k];
        r[0] = 0.0;
        store.insert("cf.r", Array::from_shape_vec(vec![k], r).unwrap());
        store.insert("cf.i", Array::zeros(vec![k]));
        let x = Array::from_shape_fn(vec![1, width, 4], |i| 1.0 + i[2] as f64);
        let y = run(&store, &p, &x);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transform_stage_is_linear() {
        let width = 8;
        let mut p = Cfft::new("cf", width);
        p.relu = false;
        let mut store = ParamStore::new();
        p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        // Linear (not affine) only with zero biases.
        let x1 = random(&[1, width, 3], 1);
        let x2 = random(&[1, width, 3], 2);
        let (a, b) = (0.7, -1.3);
        let mix = &x1 * a + &x2 * b;
        let y = run(&store, &p, &mix);
        let expect = run(&store, &p, &x1) * a + run(&store, &p, &x2) * b;
        for (u, v) in y.iter().zip(expect.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn interaction_gradients() {
        let width = 6;
        let p = Cfft::new("cf", width);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.init(&mut store, &mut rng);
        let k = bins(width);
        for leaf in ["r", "i", "r_b", "i_b"] {
            store.uniform(&format!("cf.{leaf}"), &[k], 1.0, &mut rng);
        }
        let x = random(&[2, width, 4], 5);
        let readout = random(&[2, width, 4], 6);
        let report = check_params(&store, None, true, GradCheckConfig::default(), |b| {
            let g = b.graph;
            let y = cfft_forward(b, g.constant(x.clone()), &p)?;
            Ok(g.sum_all(g.mul(y, g.constant(readout.clone()))?))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.checked, 4 * k);
    }

    #[test]
    fn rejects_bad_widths() {
        let p = Cfft::new("cf", 1);
        let mut store = ParamStore::new();
        p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::new();
        let b = Binder::new(&g, &store, false);
        assert!(cfft_forward(&b, g.constant(Array::zeros(vec![1, 1, 3])), &p).is_err());
        assert!(cfft_forward(&b, g.constant(Array::zeros(vec![1, 2, 3])), &p).is_err());
    }
}
