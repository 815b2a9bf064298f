//! Single-input single-output linear state-space kernels.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

/// `Δ·A` is treated as singular below this smallest singular value.
pub const SINGULAR_THRESHOLD: f64 = 1e-6;

/// Continuous-time system `h' = A h + B x`, `y = C h + D x` with timescale Δ.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: RowDVector<f64>,
    d: f64,
    delta: f64,
}

impl SsmParams {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: RowDVector<f64>,
        d: f64,
        delta: f64,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::param(format!(
                "state matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        if n == 0 {
            return Err(Error::param("state size must be at least 1"));
        }
        if b.len() != n || c.len() != n {
            return Err(Error::param(format!(
                "B has {} rows and C has {} columns but the state size is {n}",
                b.len(),
                c.len()
            )));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::param(format!("timescale must be positive and finite, got {delta}")));
        }
        let finite = a.iter().chain(b.iter()).chain(c.iter()).all(|v| v.is_finite()) && d.is_finite();
        if !finite {
            return Err(Error::param("non-finite entry in state-space parameters"));
        }
        Ok(Self { a, b, c, d, delta })
    }

    /// Diagonal system, the form used by the selective blocks.
    pub fn diagonal(a: &[f64], b: &[f64], c: &[f64], d: f64, delta: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(a)),
            DVector::from_column_slice(b),
            RowDVector::from_row_slice(c),
            d,
            delta,
        )
    }

    pub fn state_size(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Zero-order-hold discretization of an [`SsmParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c: RowDVector<f64>,
    pub d: f64,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Largest eigenvalue modulus of `a_bar`.
    pub fn spectral_radius(&self) -> f64 {
        self.a_bar
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub taps: Vec<f64>,
    pub skip: f64,
}

pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    zoh_discretize_with(p, SINGULAR_THRESHOLD)
}

/// ZOH with a custom singularity threshold on the smallest singular value
/// of `Δ·A`.
pub fn zoh_discretize_with(p: &SsmParams, singular_threshold: f64) -> Result<DiscreteSsm> {
    let n = p.state_size();
    let da = &p.a * p.delta;
    let db = &p.b * p.delta;
    let a_bar = da.clone().exp();
    if !a_bar.iter().all(|v| v.is_finite()) {
        return Err(Error::param("matrix exponential overflowed; reduce the timescale"));
    }
    let smallest = da
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let b_bar = if smallest < singular_threshold {
        phi_times(&da, &db)
    } else {
        let rhs = (&a_bar - DMatrix::identity(n, n)) * &db;
        da.clone()
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| phi_times(&da, &db))
    };
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
        d: p.d,
    })
}

/// `Σ_{k≥1} M^{k−1}/k! · v`, i.e. `φ(M)·v` with `φ(z) = (e^z − 1)/z`.
///
/// The series is used directly for `‖M‖ ≤ 1`; larger matrices go through
/// the exponential of the augmented block matrix `[[M, v], [0, 0]]`, whose
/// top-right column equals `φ(M)·v`.
fn phi_times(m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = m.nrows();
    if m.norm() <= 1.0 {
        let mut term = v.clone();
        let mut sum = v.clone();
        for k in 2..200 {
            term = m * term / k as f64;
            sum += &term;
            if term.norm() <= f64::EPSILON * sum.norm() {
                break;
            }
        }
        return sum;
    }
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(m);
    aug.view_mut((0, n), (n, 1)).copy_from(v);
    aug.exp().view((0, n), (n, 1)).column(0).into_owned()
}

/// Run the discrete recurrence from `h0` (zeros when `None`). Returns the
/// outputs and the final state.
pub fn scan_recurrent(
    d: &DiscreteSsm,
    x: &[f64],
    h0: Option<&DVector<f64>>,
) -> Result<(Vec<f64>, DVector<f64>)> {
    let n = d.state_size();
    let mut h = match h0 {
        Some(h0) if h0.len() != n => {
            return Err(Error::input(format!(
                "initial state has {} entries, expected {n}",
                h0.len()
            )))
        }
        Some(h0) => h0.clone(),
        None => DVector::zeros(n),
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite input sample"));
    }
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        h = &d.a_bar * &h + &d.b_bar * xk;
        y.push(d.c.dot(&h.transpose()) + d.d * xk);
    }
    Ok((y, h))
}

/// Taps `C·Ā^k·B̄` for `k in 0..len` via the Krylov sequence.
pub fn build_conv_kernel(d: &DiscreteSsm, len: usize) -> Result<ConvKernel> {
    if len < 1 {
        return Err(Error::param("kernel length must be at least 1"));
    }
    let mut v = d.b_bar.clone();
    let mut taps = Vec::with_capacity(len);
    for _ in 0..len {
        taps.push(d.c.dot(&v.transpose()));
        v = &d.a_bar * v;
    }
    Ok(ConvKernel { taps, skip: d.d })
}

/// Causal convolution with `k.taps` plus the skip term. Extra taps beyond
/// the input length are ignored.
pub fn apply_conv(x: &[f64], k: &ConvKernel) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::input("convolution input must be non-empty"));
    }
    let out = (0..x.len())
        .map(|t| {
            let reach = t.min(k.taps.len().saturating_sub(1));
            let conv: f64 = (0..=reach)
                .filter(|&j| j < k.taps.len())
                .map(|j| k.taps[j] * x[t - j])
                .sum();
            conv + k.skip * x[t]
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn zero_state_matrix_takes_the_series_branch() {
        let p = SsmParams::diagonal(&[0.0], &[1.0], &[1.0], 0.0, 0.5).unwrap();
        let d = zoh_discretize(&p).unwrap();
        assert!((d.a_bar[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((d.b_bar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_closed_form() {
        let p = SsmParams::diagonal(&[-1.0], &[1.0], &[1.0], 0.0, 0.1).unwrap();
        let d = zoh_discretize(&p).unwrap();
        let expect_a = (-0.1f64).exp();
        // (e^{ΔA} − 1)·A⁻¹·B with A = −1
        let expect_b = (expect_a - 1.0) / -1.0;
        assert!(close(d.a_bar[(0, 0)], expect_a, 1e-12));
        assert!(close(d.b_bar[0], expect_b, 1e-12));
        assert!((d.a_bar[(0, 0)] - 0.904837).abs() < 1e-6);
        assert!((d.b_bar[0] - 0.095163).abs() < 1e-6);
    }

    #[test]
    fn diagonal_matches_per_entry_scalars() {
        let p = SsmParams::diagonal(&[-1.0, -2.0], &[1.0, 1.0], &[1.0, 1.0], 0.0, 0.2).unwrap();
        let d = zoh_discretize(&p).unwrap();
        for (i, a) in [-1.0f64, -2.0].into_iter().enumerate() {
            let ea = (0.2 * a).exp();
            assert!(close(d.a_bar[(i, i)], ea, 1e-12));
            assert!(close(d.b_bar[i], (ea - 1.0) / a, 1e-12));
        }
        assert!(d.a_bar[(0, 1)].abs() < 1e-15 && d.a_bar[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn non_normal_matrix_matches_augmented_exponential() {
        // Upper-triangular A: B̄ from the block-matrix identity computed by
        // an independent Taylor expansion of the 3x3 augmented exponential.
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, 0.0, -1.5]);
        let b = DVector::from_column_slice(&[0.3, -0.7]);
        let delta = 0.4;
        let p = SsmParams::new(a.clone(), b.clone(), RowDVector::from_row_slice(&[1.0, 1.0]), 0.0, delta)
            .unwrap();
        let d = zoh_discretize(&p).unwrap();
        let mut aug = DMatrix::zeros(3, 3);
        aug.view_mut((0, 0), (2, 2)).copy_from(&(&a * delta));
        aug.view_mut((0, 2), (2, 1)).copy_from(&(&b * delta));
        let mut term = DMatrix::identity(3, 3);
        let mut sum = DMatrix::identity(3, 3);
        for k in 1..60 {
            term = &term * &aug / k as f64;
            sum += &term;
        }
        for i in 0..2 {
            assert!(close(d.b_bar[i], sum[(i, 2)], 1e-12));
            for j in 0..2 {
                assert!((d.a_bar[(i, j)] - sum[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        let sq = DMatrix::zeros(2, 3);
        assert!(SsmParams::new(sq, DVector::zeros(2), RowDVector::zeros(2), 0.0, 1.0).is_err());
        assert!(SsmParams::diagonal(&[-1.0], &[1.0], &[1.0], 0.0, 0.0).is_err());
        assert!(SsmParams::diagonal(&[-1.0], &[1.0], &[1.0], 0.0, -1.0).is_err());
        assert!(SsmParams::diagonal(&[f64::NAN], &[1.0], &[1.0], 0.0, 1.0).is_err());
        assert!(SsmParams::diagonal(&[-1.0], &[1.0, 2.0], &[1.0], 0.0, 1.0).is_err());
        assert!(SsmParams::diagonal(&[-1.0], &[1.0], &[1.0], f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn small_timescale_limit() {
        let p = SsmParams::diagonal(&[-1.0, -3.0, 0.5], &[1.0, -2.0, 0.25], &[1.0; 3], 0.0, 1e-6).unwrap();
        let d = zoh_discretize(&p).unwrap();
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((&d.a_bar - eye).norm() < 1e-5);
        let db = p.b() * p.delta();
        assert!((&d.b_bar - db).norm() / p.delta() < 1e-5);
    }

    fn scalar_system(a: f64, b: f64, c: f64, d: f64) -> DiscreteSsm {
        DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, a),
            b_bar: DVector::from_element(1, b),
            c: RowDVector::from_element(1, c),
            d,
        }
    }

    #[test]
    fn kernel_examples() {
        let k = build_conv_kernel(&scalar_system(1.0, 1.0, 1.0, 0.0), 4).unwrap();
        assert_eq!(k.taps, vec![1.0; 4]);
        let k = build_conv_kernel(&scalar_system(0.5, 1.0, 2.0, 0.0), 3).unwrap();
        assert_eq!(k.taps, vec![2.0, 1.0, 0.5]);
        assert!(build_conv_kernel(&scalar_system(0.5, 1.0, 2.0, 0.0), 0).is_err());
    }

    #[test]
    fn empty_scan_returns_initial_state() {
        let d = scalar_system(0.5, 1.0, 2.0, 0.0);
        let h0 = DVector::from_element(1, 3.0);
        let (y, h) = scan_recurrent(&d, &[], Some(&h0)).unwrap();
        assert!(y.is_empty());
        assert_eq!(h, h0);
        assert!(scan_recurrent(&d, &[1.0], Some(&DVector::zeros(2))).is_err());
    }

    #[test]
    fn impulse_response_unrolls() {
        let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.4]);
        let d = DiscreteSsm {
            a_bar: a.clone(),
            b_bar: DVector::from_column_slice(&[1.0, 0.5]),
            c: RowDVector::from_row_slice(&[0.3, -1.0]),
            d: 0.0,
        };
        let mut x = vec![0.0; 6];
        x[0] = 1.0;
        let (y, _) = scan_recurrent(&d, &x, None).unwrap();
        let mut power = DMatrix::<f64>::identity(2, 2);
        for yk in y {
            let expect = (&d.c * &power * &d.b_bar)[(0, 0)];
            assert!((yk - expect).abs() < 1e-14);
            power = &power * &a;
        }
    }

    #[test]
    fn impulse_through_conv_gives_taps_plus_skip() {
        let k = ConvKernel {
            taps: vec![0.5, 0.25, 0.125],
            skip: 2.0,
        };
        let y = apply_conv(&[1.0, 0.0, 0.0, 0.0, 0.0], &k).unwrap();
        assert_eq!(y, vec![2.5, 0.25, 0.125, 0.0, 0.0]);
        assert_eq!(apply_conv(&[0.0; 3], &k).unwrap(), vec![0.0; 3]);
        assert!(apply_conv(&[], &k).is_err());
    }

    fn stable_system() -> impl Strategy<Value = DiscreteSsm> {
        (1usize..=8).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, n * n),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-1.0f64..1.0, n),
                -1.0f64..1.0,
                0.1f64..0.95,
            )
                .prop_map(move |(a, b, c, d, radius)| {
                    let mut a = DMatrix::from_row_slice(n, n, &a);
                    let rho = a
                        .complex_eigenvalues()
                        .iter()
                        .map(|z| z.norm())
                        .fold(0.0, f64::max);
                    if rho > 0.0 {
                        a *= radius / rho;
                    }
                    DiscreteSsm {
                        a_bar: a,
                        b_bar: DVector::from_vec(b),
                        c: RowDVector::from_vec(c),
                        d,
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn conv_matches_recurrence(
            d in stable_system(),
            x in prop::collection::vec(-2.0f64..2.0, 1..=64),
        ) {
            prop_assert!(d.spectral_radius() < 1.0);
            let (y_scan, _) = scan_recurrent(&d, &x, None).unwrap();
            let y_conv = apply_conv(&x, &build_conv_kernel(&d, x.len()).unwrap()).unwrap();
            let scale = y_scan.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            for (a, b) in y_scan.iter().zip(&y_conv) {
                prop_assert!((a - b).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn scan_is_linear(
            d in stable_system(),
            xs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..=32),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let x1: Vec<f64> = xs.iter().map(|p| p.0).collect();
            let x2: Vec<f64> = xs.iter().map(|p| p.1).collect();
            let mix: Vec<f64> = xs.iter().map(|p| alpha * p.0 + beta * p.1).collect();
            let (y1, _) = scan_recurrent(&d, &x1, None).unwrap();
            let (y2, _) = scan_recurrent(&d, &x2, None).unwrap();
            let (ym, _) = scan_recurrent(&d, &mix, None).unwrap();
            for k in 0..xs.len() {
                let expect = alpha * y1[k] + beta * y2[k];
                prop_assert!((ym[k] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn shapes_are_preserved(n in 1usize..6, len in 1usize..40, klen in 1usize..50) {
            let diag: Vec<f64> = (0..n).map(|i| -(i as f64) - 0.5).collect();
            let p = SsmParams::diagonal(&diag, &vec![1.0; n], &vec![1.0; n], 0.1, 0.3).unwrap();
            let d = zoh_discretize(&p).unwrap();
            prop_assert_eq!(d.a_bar.shape(), (n, n));
            prop_assert_eq!(d.b_bar.len(), n);
            let x = vec![1.0; len];
            let (y, h) = scan_recurrent(&d, &x, None).unwrap();
            prop_assert_eq!(y.len(), len);
            prop_assert_eq!(h.len(), n);
            let k = build_conv_kernel(&d, klen).unwrap();
            prop_assert_eq!(k.taps.len(), klen);
            prop_assert_eq!(apply_conv(&x, &k).unwrap().len(), len);
        }
    }
}
