use super::*;
use crate::autodiff::gradcheck::{check_input, GradCheckConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: f64 = 30.0;

fn tone(freq: f64, len: usize, fs: f64, phase: f64) -> Vec<f64> {
    (0..len).map(|i| (2.0 * PI * freq * i as f64 / fs + phase).sin()).collect()
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Two-pass centred correlation, kept separate from the library code.
fn oracle_r(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn neg_pearson_examples() {
    let y = noise(50, 1);
    assert!(neg_pearson_loss(&y, &y).unwrap().abs() < 1e-12);
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    assert!((neg_pearson_loss(&y, &neg).unwrap() - 2.0).abs() < 1e-12);
    let aff: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
    assert!(neg_pearson_loss(&y, &aff).unwrap().abs() < 1e-12);
}

#[test]
fn neg_pearson_matches_centred_formula() {
    for seed in 0..20 {
        let y = noise(40, seed);
        let x = noise(40, seed + 100);
        let v = neg_pearson_loss(&y, &x).unwrap();
        assert!((v - (1.0 - oracle_r(&y, &x))).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&v));
    }
}

#[test]
fn neg_pearson_rejects_constants_and_bad_lengths() {
    let y = noise(10, 3);
    assert!(matches!(neg_pearson_loss(&y, &[4.0; 10]), Err(Error::DegenerateSignal(_))));
    assert!(matches!(neg_pearson_loss(&[1.0; 10], &y), Err(Error::DegenerateSignal(_))));
    assert!(neg_pearson_loss(&y, &y[..9]).is_err());
    assert!(neg_pearson_loss(&[1.0], &[2.0]).is_err());
}

fn snr_cfg() -> LossConfig {
    LossConfig {
        lambda: 1.0,
        ..LossConfig::default()
    }
}

#[test]
fn snr_flat_spectrum_matches_bandwidth_ratio() {
    // A unit impulse has |X(f)|² = 1 at every frequency.
    let n = 300;
    let y = tone(1.2, n, FS, 0.0);
    let mut x = vec![0.0; n];
    x[117] = 1.0;
    let cfg = snr_cfg();
    let w = cfg.window_halfwidth;
    let band = cfg.hr_band[1] - cfg.hr_band[0];
    let p_in = 2.0 * w / n as f64;
    let p_out = (band - 2.0 * w) / n as f64;
    let expect = -p_in / (p_out + cfg.epsilon);
    let got = snr_loss(&y, &x, FS, &cfg).unwrap();
    assert!((got - expect).abs() < 1e-9 * expect.abs(), "{got} vs {expect}");
    assert!((got + 0.08).abs() < 1e-6);
}

#[test]
fn snr_peaked_prediction_is_strongly_negative() {
    let n = 300;
    let y = tone(1.2, n, FS, 0.3);
    let mut flat = vec![0.0; n];
    flat[5] = 1.0;
    let cfg = snr_cfg();
    let sine = tone(1.2, n, FS, 0.3);
    let peaked = snr_loss(&y, &sine, FS, &cfg).unwrap();
    assert!(peaked < -5.0, "{peaked}");
    assert!(peaked < 50.0 * snr_loss(&y, &flat, FS, &cfg).unwrap());
    // The target itself is the same pure tone.
    assert_eq!(snr_loss(&y, &y, FS, &cfg).unwrap(), peaked);
}

#[test]
fn snr_zero_prediction_and_band_errors() {
    let y = tone(1.0, 64, FS, 0.0);
    let cfg = snr_cfg();
    assert_eq!(snr_loss(&y, &[0.0; 64], FS, &cfg).unwrap(), 0.0);
    let high = LossConfig {
        hr_band: [0.6, 20.0],
        ..cfg
    };
    assert!(matches!(snr_loss(&y, &noise(64, 1), FS, &high), Err(Error::Config(_))));
    assert!(snr_loss(&y[..15], &noise(15, 1), FS, &cfg).is_err());
}

/// Amplitude of a Gaussian-windowed tone at `f0` mixed with an impulse:
/// `alpha = 0` has a flat spectrum, `alpha = 1` a single smooth bump.
fn flat_to_peaked(alpha: f64, n: usize, f0: f64) -> Vec<f64> {
    let centre = n as f64 / 2.0;
    let sigma = n as f64 / 6.0;
    (0..n)
        .map(|i| {
            let t = i as f64 - centre;
            let bump = (-0.5 * (t / sigma).powi(2)).exp() * (2.0 * PI * f0 * t / FS).cos() / 20.0;
            let imp = if i == n / 2 { 1.0 } else { 0.0 };
            (1.0 - alpha) * imp + alpha * bump
        })
        .collect()
}

#[test]
fn snr_decreases_as_energy_concentrates() {
    let n = 300;
    let y = tone(1.4, n, FS, 0.0);
    let cfg = snr_cfg();
    let values: Vec<f64> = (0..=12)
        .map(|k| snr_loss(&y, &flat_to_peaked(k as f64 / 12.0, n, 1.4), FS, &cfg).unwrap())
        .collect();
    for pair in values.windows(2) {
        assert!(pair[1] < pair[0], "{values:?}");
    }
}

#[test]
fn total_loss_composition() {
    let n = 64;
    let y = tone(1.5, n, FS, 0.2);
    let x = noise(n, 9);
    let mut cfg = snr_cfg();
    cfg.lambda = 0.0;
    assert_eq!(total_loss(&y, &x, FS, &cfg).unwrap(), neg_pearson_loss(&y, &x).unwrap());
    assert_eq!(total_loss(&y, &y, FS, &cfg).unwrap(), 0.0);
    cfg.lambda = 1.0;
    let sum = neg_pearson_loss(&y, &x).unwrap() + snr_loss(&y, &x, FS, &cfg).unwrap();
    assert!((total_loss(&y, &x, FS, &cfg).unwrap() - sum).abs() < 1e-14);
}

fn tape_check(y: Vec<f64>, x: Vec<f64>, cfg: LossConfig) -> crate::autodiff::gradcheck::GradCheckReport {
    let n = y.len();
    let target = Array::from_shape_vec(vec![1, n], y).unwrap();
    let input = Array::from_shape_vec(vec![1, n], x).unwrap();
    check_input(&input, GradCheckConfig::default(), |g, v| {
        total_loss_var(g, v, &target, FS, &cfg)
    })
    .unwrap()
}

#[test]
fn neg_pearson_gradient() {
    let cfg = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let report = tape_check(noise(24, 1), noise(24, 2), cfg);
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn snr_gradient() {
    // Large lambda so the spectral term dominates the check.
    let cfg = LossConfig {
        lambda: 50.0,
        ..LossConfig::default()
    };
    let y = tone(1.3, 32, FS, 0.0);
    let x: Vec<f64> = tone(1.3, 32, FS, 0.5).iter().zip(noise(32, 4)).map(|(a, b)| a + 0.5 * b).collect();
    let report = tape_check(y, x, cfg);
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn batch_loss_is_the_mean() {
    let cfg = snr_cfg();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..3).map(|s| (tone(1.0 + 0.3 * s as f64, 40, FS, 0.0), noise(40, s))).collect();
    let target = Array::from_shape_fn(vec![3, 40], |i| rows[i[0]].0[i[1]]);
    let pred = Array::from_shape_fn(vec![3, 40], |i| rows[i[0]].1[i[1]]);
    let g = Graph::new();
    let v = total_loss_var(&g, g.constant(pred), &target, FS, &cfg).unwrap();
    let expect = rows.iter().map(|(y, x)| total_loss(y, x, FS, &cfg).unwrap()).sum::<f64>() / 3.0;
    assert!((g.scalar(v) - expect).abs() < 1e-12);
}

fn bvp(x: Vec<f64>, fs: f64) -> BvpSignal {
    BvpSignal::new(x, fs).unwrap()
}

#[test]
fn hr_examples() {
    let hr = estimate_hr(&bvp(tone(1.2, 300, FS, 0.4), FS), DEFAULT_HR_BAND).unwrap();
    assert!((hr - 72.0).abs() <= 0.5, "{hr}");
    let mix: Vec<f64> = tone(1.0, 300, FS, 0.0)
        .iter()
        .zip(tone(2.5, 300, FS, 1.0))
        .map(|(a, b)| a + 0.3 * b)
        .collect();
    let hr = estimate_hr(&bvp(mix, FS), DEFAULT_HR_BAND).unwrap();
    assert!((hr - 60.0).abs() <= 0.5, "{hr}");
    assert!(matches!(
        estimate_hr(&bvp(vec![3.0; 300], FS), DEFAULT_HR_BAND),
        Err(Error::NoPeak { .. })
    ));
}

#[test]
fn hr_input_contract() {
    assert!(estimate_hr(&bvp(tone(1.2, 50, FS, 0.0), FS), DEFAULT_HR_BAND).is_err());
    assert!(estimate_hr(&bvp(tone(1.2, 300, FS, 0.0), FS), [0.6, 16.0]).is_err());
    assert!(BvpSignal::new(vec![f64::NAN], FS).is_err());
    assert!(BvpSignal::new(vec![1.0], 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hr_error_within_resolution(f in 0.7f64..3.2, phase in 0.0f64..6.28, secs in 4usize..12) {
        let n = secs * 30;
        let hr = estimate_hr(&bvp(tone(f, n, FS, phase), FS), DEFAULT_HR_BAND).unwrap();
        prop_assert!((hr - 60.0 * f).abs() <= 60.0 / secs as f64);
    }

    #[test]
    fn neg_pearson_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let y = noise(30, seed);
        let x = noise(30, seed + 7);
        let base = neg_pearson_loss(&y, &x).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let y2: Vec<f64> = y.iter().map(|v| a * v - b).collect();
        prop_assert!((neg_pearson_loss(&y, &scaled).unwrap() - base).abs() < 1e-10);
        prop_assert!((neg_pearson_loss(&y2, &x).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn rmse_bounds_mae_and_rho_symmetric(pred in prop::collection::vec(40.0f64..180.0, 2..40), shift in prop::collection::vec(-20.0f64..20.0, 40)) {
        let gt: Vec<f64> = pred.iter().zip(&shift).map(|(p, s)| p + s).collect();
        let m = compute_metrics(&pred, &gt, None).unwrap().overall;
        prop_assert!(m.rmse >= m.mae - 1e-12 && m.mae >= 0.0);
        let back = compute_metrics(&gt, &pred, None).unwrap().overall;
        prop_assert_eq!(m.rho.is_some(), back.rho.is_some());
        if let (Some(a), Some(b)) = (m.rho, back.rho) {
            prop_assert!((a - b).abs() < 1e-12 && a.abs() <= 1.0);
        }
    }
}

#[test]
fn metrics_examples() {
    let gt = [60.0, 72.0, 85.0, 101.0];
    let exact = compute_metrics(&gt, &gt, None).unwrap().overall;
    assert_eq!((exact.mae, exact.rmse), (0.0, 0.0));
    assert!((exact.rho.unwrap() - 1.0).abs() < 1e-12);
    let shifted: Vec<f64> = gt.iter().map(|v| v + 2.0).collect();
    let m = compute_metrics(&shifted, &gt, None).unwrap().overall;
    assert!((m.mae - 2.0).abs() < 1e-12 && (m.rmse - 2.0).abs() < 1e-12);
    assert!((m.rho.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(compute_metrics(&[70.0], &[71.0], None).unwrap().overall.rho, None);
    assert!(compute_metrics(&[70.0], &[71.0, 2.0], None).is_err());
}

#[test]
fn fairness_deltas_are_dark_minus_light() {
    use SkinTone::*;
    let gt = [60.0, 70.0, 80.0, 90.0, 65.0, 75.0];
    let pred = [61.0, 69.0, 84.0, 95.0, 65.0, 77.0];
    let tones = [Light, Light, Dark, Dark, Medium, Medium];
    let r = compute_metrics(&pred, &gt, Some(&tones)).unwrap();
    assert_eq!(r.groups.len(), 3);
    let d = r.delta.unwrap();
    assert!((d.mae - (4.5 - 1.0)).abs() < 1e-12);
    let rmse_dark = ((16.0 + 25.0) / 2.0f64).sqrt();
    assert!((d.rmse - (rmse_dark - 1.0)).abs() < 1e-12);
    let text = r.to_text();
    assert!(text.contains("group.dark.mae = 4.5000"));
    assert!(text.contains("delta.mae = 3.5000"));
    let none = compute_metrics(&pred[..2], &gt[..2], Some(&tones[..2])).unwrap();
    assert!(none.delta.is_none());
}

#[test]
fn report_row_layout() {
    let r = MetricsReport {
        overall: GroupMetrics {
            n: 10,
            mae: 0.96,
            rmse: 3.06,
            rho: Some(0.97),
        },
        groups: Default::default(),
        delta: None,
    };
    let row = r.row("Full model");
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[cols.len() - 3..], ["0.96", "3.06", "0.97"]);
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
}

#[test]
fn bland_altman_statistics() {
    let gt = [60.0, 70.0, 80.0];
    let same = bland_altman(&gt, &gt).unwrap();
    assert!(same.points.iter().all(|p| p.1 == 0.0));
    assert_eq!((same.bias, same.lower, same.upper), (0.0, 0.0, 0.0));
    let shifted: Vec<f64> = gt.iter().map(|v| v + 3.0).collect();
    let s = bland_altman(&shifted, &gt).unwrap();
    assert!((s.bias - 3.0).abs() < 1e-12 && s.sd.abs() < 1e-12);

    let p = noise(25, 1).iter().map(|v| 80.0 + 10.0 * v).collect::<Vec<_>>();
    let g = noise(25, 2).iter().map(|v| 80.0 + 10.0 * v).collect::<Vec<_>>();
    let ba = bland_altman(&p, &g).unwrap();
    let diffs: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / 25.0;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 24.0).sqrt();
    assert!((ba.bias - mean).abs() < 1e-12 && (ba.sd - sd).abs() < 1e-12);
    assert!((ba.upper - (mean + 1.96 * sd)).abs() < 1e-12);
    assert!(bland_altman(&[1.0], &[1.0]).is_err());
}

#[test]
fn skin_tone_vocabulary() {
    for t in SkinTone::ALL {
        assert_eq!(t.as_str().parse::<SkinTone>().unwrap(), t);
    }
    assert!("olive".parse::<SkinTone>().is_err());
}
