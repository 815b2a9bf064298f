//! Token encoding with bidirectional scans and the cross-modal interaction
//! whose scans share their state-transition and input maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Binder, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ssm::{bidirectional_scan, GateActivation, Merge, SelectiveBlockParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Learned,
    Sinusoidal,
    None,
}

/// Token projection + positional embedding + bidirectional scan over
/// `[B, C, L]` token sequences (one token per time step).
#[derive(Debug, Clone, PartialEq)]
pub struct VimEncoder {
    pub prefix: String,
    pub width: usize,
    pub max_tokens: usize,
    pub positional: Positional,
    pub fwd: SelectiveBlockParams,
    pub bwd: SelectiveBlockParams,
}

impl VimEncoder {
    pub fn new(prefix: impl Into<String>, width: usize, state_size: usize, max_tokens: usize) -> Self {
        let prefix = prefix.into();
        Self {
            fwd: SelectiveBlockParams::new(format!("{prefix}.fwd"), width, state_size),
            bwd: SelectiveBlockParams::new(format!("{prefix}.bwd"), width, state_size),
            prefix,
            width,
            max_tokens,
            positional: Positional::Learned,
        }
    }

    pub fn with_gate(mut self, gate: GateActivation) -> Self {
        self.fwd.gate = gate;
        self.bwd.gate = gate;
        self
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.width;
        store.uniform(&self.name("proj.w"), &[c, c], 1.0 / (c as f64).sqrt(), rng);
        store.zeros(&self.name("proj.b"), &[c]);
        if self.positional == Positional::Learned {
            store.uniform(&self.name("pos"), &[c, self.max_tokens], 0.02, rng);
        }
        self.fwd.init(store, rng)?;
        self.bwd.init(store, rng)
    }
}

fn sinusoidal(width: usize, len: usize) -> Array {
    Array::from_shape_fn(vec![width, len], |i| {
        let (c, t) = (i[0], i[1] as f64);
        let rate = 10000f64.powf(-((c / 2 * 2) as f64) / width as f64);
        if c % 2 == 0 {
            (t * rate).sin()
        } else {
            (t * rate).cos()
        }
    })
}

/// `[B, C, L]` → `[B, C, L]`.
pub fn vim_encode(b: &Binder, x: Var, p: &VimEncoder) -> Result<Var> {
    let g = b.graph;
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != p.width {
        return Err(Error::shape(format!(
            "encoder of width {} got tokens {shape:?}",
            p.width
        )));
    }
    let len = shape[2];
    if len > p.max_tokens {
        return Err(Error::shape(format!(
            "{len} tokens exceed the positional table of {}",
            p.max_tokens
        )));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    let t = g.linear(t, b.param(&p.name("proj.w"))?, Some(b.param(&p.name("proj.b"))?))?;
    let mut t = g.permute(t, &[0, 2, 1])?;
    match p.positional {
        Positional::Learned => {
            let pos = g.slice(b.param(&p.name("pos"))?, 1, 0, len)?;
            t = g.add(t, pos)?;
        }
        Positional::Sinusoidal => t = g.add(t, g.constant(sinusoidal(p.width, len)))?,
        Positional::None => {}
    }
    bidirectional_scan(b, t, &p.fwd, &p.bwd, Merge::Sum)
}

/// Both modality streams: per-stream encoders whose scans read the same
/// `A`/`B` tensors when `shared` is set, followed by per-stream linear maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedInteraction {
    pub prefix: String,
    pub width: usize,
    pub rgb: VimEncoder,
    pub rf: VimEncoder,
    pub shared: bool,
    /// With `false` the encoder is replaced by the identity.
    pub encode: bool,
}

impl SharedInteraction {
    pub fn new(prefix: impl Into<String>, width: usize, state_size: usize, max_tokens: usize, shared: bool) -> Self {
        let prefix = prefix.into();
        let mut rgb = VimEncoder::new(format!("{prefix}.rgb.vim"), width, state_size, max_tokens);
        let mut rf = VimEncoder::new(format!("{prefix}.rf.vim"), width, state_size, max_tokens);
        if shared {
            for (dir, a, b) in [("fwd", &mut rgb.fwd, &mut rf.fwd), ("bwd", &mut rgb.bwd, &mut rf.bwd)] {
                let a_log = format!("{prefix}.shared.{dir}.a_log");
                let b_proj = format!("{prefix}.shared.{dir}.b_proj.w");
                *a = a.clone().sharing(a_log.clone(), b_proj.clone());
                *b = b.clone().sharing(a_log, b_proj);
            }
        }
        Self {
            prefix,
            width,
            rgb,
            rf,
            shared,
            encode: true,
        }
    }

    pub fn with_gate(mut self, gate: GateActivation) -> Self {
        self.rgb = self.rgb.with_gate(gate);
        self.rf = self.rf.with_gate(gate);
        self
    }

    pub fn with_positional(mut self, positional: Positional) -> Self {
        self.rgb.positional = positional;
        self.rf.positional = positional;
        self
    }

    fn post(&self, stream: &str, leaf: &str) -> String {
        format!("{}.{stream}.post.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.width;
        if self.encode {
            self.rgb.init(store, rng)?;
            self.rf.init(store, rng)?;
        }
        for stream in ["rgb", "rf"] {
            store.uniform(&self.post(stream, "w"), &[c, c], 1.0 / (c as f64).sqrt(), rng);
            store.zeros(&self.post(stream, "b"), &[c]);
        }
        Ok(())
    }
}

/// `(hc, hf)` → `(Linear(hc + Vim(hc)), Linear(hf + Vim(hf)))`.
pub fn interact_shared(b: &Binder, hc: Var, hf: Var, p: &SharedInteraction) -> Result<(Var, Var)> {
    let g = b.graph;
    let (sc, sf) = (g.shape(hc), g.shape(hf));
    if sc != sf {
        return Err(Error::shape(format!(
            "modality token shapes differ: {sc:?} vs {sf:?}"
        )));
    }
    let stream = |h: Var, enc: &VimEncoder, name: &str| -> Result<Var> {
        let v = if p.encode { vim_encode(b, h, enc)? } else { h };
        let s = g.permute(g.add(h, v)?, &[0, 2, 1])?;
        let y = g.linear(s, b.param(&p.post(name, "w"))?, Some(b.param(&p.post(name, "b"))?))?;
        g.permute(y, &[0, 2, 1])
    };
    Ok((stream(hc, &p.rgb, "rgb")?, stream(hf, &p.rf, "rf")?))
}
