use ndarray::{Axis, Slice, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Frame offsets `k` of the four difference maps `D_k = X_t − X_{t+k}`,
/// in channel order.
pub const DIFF_OFFSETS: [isize; 4] = [-2, -1, 1, 2];

/// What `X_{t+k}` means when `t + k` falls outside the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Replicate the edge frame, so boundary differences shrink to zero.
    #[default]
    Clamp,
    /// Treat frames outside the clip as zeros.
    Zero,
}

fn source(t: usize, k: isize, len: usize, boundary: Boundary) -> Option<usize> {
    let s = t as isize + k;
    match boundary {
        Boundary::Clamp => Some(s.clamp(0, len as isize - 1) as usize),
        Boundary::Zero => (0..len as isize).contains(&s).then_some(s as usize),
    }
}

/// Four temporal difference maps concatenated along `chan_axis`.
///
/// The output has `4×` the channels of `x` and the same time length. Needs
/// at least five time steps.
pub fn temporal_diff(
    g: &Graph,
    x: Var,
    time_axis: usize,
    chan_axis: usize,
    boundary: Boundary,
) -> Result<Var> {
    let shape = g.shape(x);
    if time_axis >= shape.len() || chan_axis >= shape.len() || time_axis == chan_axis {
        return Err(Error::shape(format!(
            "time axis {time_axis} / channel axis {chan_axis} invalid for {shape:?}"
        )));
    }
    let len = shape[time_axis];
    if len < 5 {
        return Err(Error::input(format!(
            "temporal differencing needs at least 5 steps, got {len}"
        )));
    }
    let chans = shape[chan_axis];
    let mut out_shape = shape.clone();
    out_shape[chan_axis] = 4 * chans;
    let mut out = Array::zeros(out_shape);
    {
        let xv = g.value(x);
        for (j, &k) in DIFF_OFFSETS.iter().enumerate() {
            let mut block = out.slice_axis_mut(Axis(chan_axis), Slice::from(j * chans..(j + 1) * chans));
            for t in 0..len {
                let here = xv.slice_axis(Axis(time_axis), Slice::from(t..t + 1));
                let dst = block.slice_axis_mut(Axis(time_axis), Slice::from(t..t + 1));
                match source(t, k, len, boundary) {
                    Some(s) => {
                        let there = xv.slice_axis(Axis(time_axis), Slice::from(s..s + 1));
                        Zip::from(dst).and(here).and(there).for_each(|o, &a, &b| *o = a - b);
                    }
                    None => Zip::from(dst).and(here).for_each(|o, &a| *o = a),
                }
            }
        }
    }
    Ok(g.custom(&[x], out, move |grad, p, _, _| {
        let mut dx = Array::zeros(p[0].raw_dim());
        for (j, &k) in DIFF_OFFSETS.iter().enumerate() {
            let block = grad.slice_axis(Axis(chan_axis), Slice::from(j * chans..(j + 1) * chans));
            for t in 0..len {
                let gt = block.slice_axis(Axis(time_axis), Slice::from(t..t + 1));
                {
                    let dst = dx.slice_axis_mut(Axis(time_axis), Slice::from(t..t + 1));
                    Zip::from(dst).and(&gt).for_each(|d, &v| *d += v);
                }
                if let Some(s) = source(t, k, len, boundary) {
                    let dst = dx.slice_axis_mut(Axis(time_axis), Slice::from(s..s + 1));
                    Zip::from(dst).and(&gt).for_each(|d, &v| *d -= v);
                }
            }
        }
        vec![Some(dx)]
    }))
}
