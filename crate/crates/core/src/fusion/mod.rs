//! Cross-modal interaction, channel-frequency refinement and the BVP head.

mod cfft;
mod vim;

pub use cfft::{bins, cfft_forward, forward_matrices, inverse_matrices, Cfft};
pub use vim::{interact_shared, vim_encode, Positional, SharedInteraction, VimEncoder};

use rand::Rng;

use crate::autodiff::{Binder, ParamStore, Var};
use crate::error::{Error, Result};

/// Summation fusion, ×2 linear upsampling in time, and a pointwise
/// projection to one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub prefix: String,
    pub width: usize,
}

impl Predictor {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        Self {
            prefix: prefix.into(),
            width,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.width;
        store.uniform(&self.name("w"), &[c, 1], 1.0 / (c as f64).sqrt(), rng);
        store.zeros(&self.name("b"), &[1]);
    }
}

/// `[B, C, T/2]` streams → BVP `[B, T]`.
pub fn fuse_and_predict(b: &Binder, hc5: Var, hf5: Var, p: &Predictor) -> Result<Var> {
    let g = b.graph;
    let (sc, sf) = (g.shape(hc5), g.shape(hf5));
    if sc != sf || sc.len() != 3 || sc[1] != p.width {
        return Err(Error::shape(format!(
            "predictor of width {} got streams {sc:?} and {sf:?}",
            p.width
        )));
    }
    let fused = g.add(hc5, hf5)?;
    let up = g.upsample_linear2x(fused, 2)?;
    let up = g.permute(up, &[0, 2, 1])?;
    let y = g.linear(up, b.param(&p.name("w"))?, Some(b.param(&p.name("b"))?))?;
    g.reshape(y, &[sc[0], 2 * sc[2]])
}
