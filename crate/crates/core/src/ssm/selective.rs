//! Gated selective state-space block and its bidirectional composition.
//!
//! Feature sequences are `[B, C, T]`. Inside a block the per-channel
//! diagonal system `h' = A h + B(x) x`, `y = C(x) h + D x` is discretized
//! at every step with an input-dependent timescale `Δ(x)`:
//! `Ā = exp(Δ A)`, `B̄ = Δ φ(Δ A) B` with `φ(z) = (e^z − 1)/z`, which is the
//! exact zero-order hold for diagonal `A`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Binder, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Sigmoid,
    Silu,
}

/// How the forward and time-reversed passes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Merge {
    #[default]
    Sum,
    Mean,
}

/// Layout of one selective block inside a [`ParamStore`].
///
/// Every tensor lives under `prefix` except the state-transition log-rates
/// and the input map, whose names can point at tensors owned by another
/// block so that several scans evolve with the same `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveBlockParams {
    pub prefix: String,
    pub width: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub gate: GateActivation,
    pub a_log: String,
    pub b_proj: String,
}

impl SelectiveBlockParams {
    pub fn new(prefix: impl Into<String>, width: usize, state_size: usize) -> Self {
        let prefix = prefix.into();
        Self {
            a_log: format!("{prefix}.a_log"),
            b_proj: format!("{prefix}.b_proj.w"),
            prefix,
            width,
            state_size,
            conv_width: 4,
            gate: GateActivation::Sigmoid,
        }
    }

    /// Read `A` and `B` from the named tensors instead of this block's own.
    pub fn sharing(mut self, a_log: impl Into<String>, b_proj: impl Into<String>) -> Self {
        self.a_log = a_log.into();
        self.b_proj = b_proj.into();
        self
    }

    pub fn with_gate(mut self, gate: GateActivation) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_conv_width(mut self, k: usize) -> Self {
        self.conv_width = k;
        self
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Register this block's tensors. Shared tensors that already exist are
    /// left untouched.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let (c, n, k) = (self.width, self.state_size, self.conv_width);
        if c == 0 || n == 0 || k == 0 {
            return Err(Error::param("selective block sizes must be positive"));
        }
        let lin = 1.0 / (c as f64).sqrt();
        for proj in ["in_proj", "gate_proj", "out_proj"] {
            store.uniform(&self.name(&format!("{proj}.w")), &[c, c], lin, rng);
            store.zeros(&self.name(&format!("{proj}.b")), &[c]);
        }
        store.uniform(&self.name("conv.w"), &[c, 1, k], 1.0 / (k as f64).sqrt(), rng);
        store.zeros(&self.name("conv.b"), &[c]);
        store.uniform(&self.name("dt_proj.w"), &[c, c], lin, rng);
        // Timescales log-uniform in [1e-3, 1e-1] at zero input.
        let dt_bias: Vec<f64> = (0..c)
            .map(|_| {
                let dt: f64 = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        store.insert(self.name("dt_proj.b"), Array::from_shape_vec(vec![c], dt_bias).expect("sized"));
        store.uniform(&self.name("c_proj.w"), &[c, n], lin, rng);
        store.fill(&self.name("skip"), &[c], 1.0);
        if store.get(&self.b_proj).is_none() {
            store.uniform(&self.b_proj, &[c, n], lin, rng);
        }
        if store.get(&self.a_log).is_none() {
            // A = −diag(1..N) per channel.
            let a: Vec<f64> = (0..c).flat_map(|_| (1..=n).map(|i| (i as f64).ln())).collect();
            store.insert(self.a_log.clone(), Array::from_shape_vec(vec![c, n], a).expect("sized"));
        }
        Ok(())
    }

    /// Every tensor name this block reads.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "in_proj.w", "in_proj.b", "gate_proj.w", "gate_proj.b", "out_proj.w", "out_proj.b",
            "conv.w", "conv.b", "dt_proj.w", "dt_proj.b", "c_proj.w", "skip",
        ]
        .iter()
        .map(|leaf| self.name(leaf))
        .collect();
        names.push(self.a_log.clone());
        names.push(self.b_proj.clone());
        names
    }

    /// Check that the store holds mutually consistent tensors for this block.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let (c, n, k) = (self.width, self.state_size, self.conv_width);
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for proj in ["in_proj", "gate_proj", "out_proj", "dt_proj"] {
            expected.push((self.name(&format!("{proj}.w")), vec![c, c]));
            expected.push((self.name(&format!("{proj}.b")), vec![c]));
        }
        expected.push((self.name("conv.w"), vec![c, 1, k]));
        expected.push((self.name("conv.b"), vec![c]));
        expected.push((self.name("c_proj.w"), vec![c, n]));
        expected.push((self.name("skip"), vec![c]));
        expected.push((self.a_log.clone(), vec![c, n]));
        expected.push((self.b_proj.clone(), vec![c, n]));
        for (name, shape) in expected {
            match store.get(&name) {
                None => return Err(Error::param(format!("missing parameter `{name}`"))),
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(Error::param(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// One gated selective block on `x: [B, C, T]`; output has the same shape.
pub fn selective_block(b: &Binder, x: Var, p: &SelectiveBlockParams) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != p.width {
        return Err(Error::shape(format!(
            "selective block of width {} got input {shape:?}",
            p.width
        )));
    }
    let c = p.width;
    let param = |leaf: &str| b.param(&p.name(leaf));
    let xt = g.permute(x, &[0, 2, 1])?;

    let x1 = g.linear(xt, param("in_proj.w")?, Some(param("in_proj.b")?))?;
    let x1 = g.permute(x1, &[0, 2, 1])?;
    let x1 = g.conv1d(x1, param("conv.w")?, p.conv_width - 1, 0, c)?;
    let conv_b = g.reshape(param("conv.b")?, &[c, 1])?;
    let x1 = g.add(x1, conv_b)?;
    let x1 = g.permute(x1, &[0, 2, 1])?;

    let gate = g.linear(xt, param("gate_proj.w")?, Some(param("gate_proj.b")?))?;
    let gate = match p.gate {
        GateActivation::Sigmoid => g.sigmoid(gate),
        GateActivation::Silu => g.silu(gate),
    };
    let u = g.mul(x1, gate)?;

    let delta = g.softplus(g.linear(u, param("dt_proj.w")?, Some(param("dt_proj.b")?))?);
    let bm = g.matmul(u, b.param(&p.b_proj)?)?;
    let cm = g.matmul(u, param("c_proj.w")?)?;
    let a = g.neg(g.exp(b.param(&p.a_log)?));
    let y = selective_scan(g, u, delta, a, bm, cm, param("skip")?)?;

    let out = g.relu(g.linear(y, param("out_proj.w")?, Some(param("out_proj.b")?))?);
    g.permute(out, &[0, 2, 1])
}

/// Forward pass on `x` plus the re-reversed pass on time-reversed `x`.
pub fn bidirectional_scan(
    b: &Binder,
    x: Var,
    fwd: &SelectiveBlockParams,
    bwd: &SelectiveBlockParams,
    merge: Merge,
) -> Result<Var> {
    if fwd.width != bwd.width {
        return Err(Error::shape(format!(
            "forward width {} differs from backward width {}",
            fwd.width, bwd.width
        )));
    }
    let g = b.graph;
    let forward = selective_block(b, x, fwd)?;
    let reversed = g.flip(x, 2)?;
    let backward = g.flip(selective_block(b, reversed, bwd)?, 2)?;
    let sum = g.add(forward, backward)?;
    Ok(match merge {
        Merge::Sum => sum,
        Merge::Mean => g.scale(sum, 0.5),
    })
}

/// `φ(z) = (e^z − 1)/z` and its derivative, with series near zero.
fn phi(z: f64) -> (f64, f64) {
    if z.abs() < 1e-3 {
        let v = 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0;
        let d = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
        (v, d)
    } else {
        let em1 = z.exp_m1();
        (em1 / z, (z * z.exp() - em1) / (z * z))
    }
}

struct ScanDims {
    batch: usize,
    len: usize,
    chans: usize,
    state: usize,
}

/// Selective scan over `u: [B, T, D]` with per-step timescales
/// `delta: [B, T, D]`, diagonal rates `a: [D, N]`, input and output maps
/// `bm, cm: [B, T, N]` and skip `d: [D]`. Returns `[B, T, D]`.
///
/// The state trajectory is kept for the reverse pass, which is written out
/// by hand rather than traced step by step.
pub fn selective_scan(
    g: &Graph,
    u: Var,
    delta: Var,
    a: Var,
    bm: Var,
    cm: Var,
    d: Var,
) -> Result<Var> {
    let us = g.shape(u);
    if us.len() != 3 {
        return Err(Error::shape(format!("scan input must be [B, T, D], got {us:?}")));
    }
    let (batch, len, chans) = (us[0], us[1], us[2]);
    let state = g.shape(a).get(1).copied().unwrap_or(0);
    let ok = g.shape(delta) == us
        && g.shape(a) == [chans, state]
        && g.shape(bm) == [batch, len, state]
        && g.shape(cm) == [batch, len, state]
        && g.shape(d) == [chans];
    if !ok {
        return Err(Error::shape(format!(
            "scan shapes u {us:?} delta {:?} a {:?} b {:?} c {:?} d {:?}",
            g.shape(delta),
            g.shape(a),
            g.shape(bm),
            g.shape(cm),
            g.shape(d)
        )));
    }
    let dims = ScanDims {
        batch,
        len,
        chans,
        state,
    };
    let flat = |v: Var| g.value(v).as_standard_layout().iter().copied().collect::<Vec<f64>>();
    let (uv, dv, av, bv, cv, skip) = (flat(u), flat(delta), flat(a), flat(bm), flat(cm), flat(d));
    let (y, states) = scan_forward(&dims, &uv, &dv, &av, &bv, &cv, &skip);
    let value = Array::from_shape_vec(us.clone(), y).expect("sized");
    Ok(g.custom(&[u, delta, a, bm, cm, d], value, move |grad, parents, _, need| {
        let flat = |a: &Array| a.as_standard_layout().iter().copied().collect::<Vec<f64>>();
        let grads = scan_backward(
            &dims,
            &flat(grad),
            &flat(parents[0]),
            &flat(parents[1]),
            &flat(parents[2]),
            &flat(parents[3]),
            &flat(parents[4]),
            &flat(parents[5]),
            &states,
        );
        grads
            .into_iter()
            .zip(parents)
            .zip(need)
            .map(|((gv, p), &n)| n.then(|| Array::from_shape_vec(p.raw_dim(), gv).expect("sized")))
            .collect()
    }))
}

fn scan_forward(
    s: &ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    skip: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (t_len, dn, n) = (s.len, s.chans * s.state, s.state);
    let mut y = vec![0.0; s.batch * t_len * s.chans];
    let mut states = vec![0.0; s.batch * t_len * dn];
    let mut h = vec![0.0; dn];
    for b in 0..s.batch {
        h.fill(0.0);
        for t in 0..t_len {
            let row = (b * t_len + t) * s.chans;
            let bc = (b * t_len + t) * n;
            for c in 0..s.chans {
                let (dt, ut) = (delta[row + c], u[row + c]);
                let mut acc = skip[c] * ut;
                for k in 0..n {
                    let z = dt * a[c * n + k];
                    let (ph, _) = phi(z);
                    let hk = &mut h[c * n + k];
                    *hk = z.exp() * *hk + dt * ph * bm[bc + k] * ut;
                    acc += cm[bc + k] * *hk;
                }
                y[row + c] = acc;
            }
            states[(b * t_len + t) * dn..][..dn].copy_from_slice(&h);
        }
    }
    (y, states)
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    s: &ScanDims,
    gy: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    skip: &[f64],
    states: &[f64],
) -> Vec<Vec<f64>> {
    let (t_len, dn, n) = (s.len, s.chans * s.state, s.state);
    let mut du = vec![0.0; u.len()];
    let mut ddelta = vec![0.0; delta.len()];
    let mut da = vec![0.0; a.len()];
    let mut dbm = vec![0.0; bm.len()];
    let mut dcm = vec![0.0; cm.len()];
    let mut dskip = vec![0.0; skip.len()];
    // Adjoint of h_t arriving from step t + 1.
    let mut gh = vec![0.0; dn];
    for b in 0..s.batch {
        gh.fill(0.0);
        for t in (0..t_len).rev() {
            let row = (b * t_len + t) * s.chans;
            let bc = (b * t_len + t) * n;
            let h_now = &states[(b * t_len + t) * dn..][..dn];
            let h_prev = (t > 0).then(|| &states[(b * t_len + t - 1) * dn..][..dn]);
            for c in 0..s.chans {
                let (dt, ut, g) = (delta[row + c], u[row + c], gy[row + c]);
                du[row + c] += g * skip[c];
                dskip[c] += g * ut;
                for k in 0..n {
                    let i = c * n + k;
                    let ghk = gh[i] + g * cm[bc + k];
                    dcm[bc + k] += g * h_now[i];
                    let z = dt * a[i];
                    let ab = z.exp();
                    let (ph, dph) = phi(z);
                    let hp = h_prev.map_or(0.0, |h| h[i]);
                    let d_ab = ghk * hp;
                    let d_bbar = ghk * ut;
                    du[row + c] += ghk * dt * ph * bm[bc + k];
                    dbm[bc + k] += d_bbar * dt * ph;
                    let dz = d_ab * ab + d_bbar * dt * bm[bc + k] * dph;
                    ddelta[row + c] += d_bbar * ph * bm[bc + k] + dz * a[i];
                    da[i] += dz * dt;
                    gh[i] = ghk * ab;
                }
            }
        }
    }
    vec![du, ddelta, da, dbm, dcm, dskip]
}
