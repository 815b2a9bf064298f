//! Convolution and normalization kernels with hand-written adjoints.

use ndarray::IxDyn;

use super::ops::split_at_axis;
use super::{Array, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Conv2dGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeom {
    /// Valid output x range for kernel column `kx` (stride 1 only).
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky).min(self.oh);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.oh);
        (lo, hi.max(lo))
    }
}

const LANES: usize = 8;
const CHUNK: usize = 16;
const CO_BLOCK: usize = 4;

/// Zero-padded copy of the `ci` planes of one image, with `CHUNK` columns of
/// slack on the right so row chunks can over-read.
fn pad_planes(x: &[f64], g: &Conv2dGeom) -> (Vec<f64>, usize, usize) {
    let ph = g.h + 2 * g.pad;
    let pw = g.w + 2 * g.pad + CHUNK;
    let mut out = vec![0.0; g.ci * ph * pw];
    for c in 0..g.ci {
        for y in 0..g.h {
            let src = &x[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
            let dst = (c * ph + y + g.pad) * pw + g.pad;
            out[dst..dst + g.w].copy_from_slice(src);
        }
    }
    (out, ph, pw)
}

fn conv2d_forward(x: &[f64], wt: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut out = vec![0.0; g.n * g.co * ohw];
    if g.stride == 1 {
        for n in 0..g.n {
            let (xp, ph, pw) = pad_planes(&x[n * g.ci * hw..(n + 1) * g.ci * hw], g);
            for co0 in (0..g.co).step_by(CO_BLOCK) {
                let nb = CO_BLOCK.min(g.co - co0);
                for oy in 0..g.oh {
                    for ox0 in (0..g.ow).step_by(CHUNK) {
                        let mut acc = [[0.0f64; CHUNK]; CO_BLOCK];
                        for c in 0..g.ci {
                            for ky in 0..g.kh {
                                let row = &xp[(c * ph + oy + ky) * pw + ox0..];
                                for kx in 0..g.kw {
                                    let s: &[f64; CHUNK] =
                                        row[kx..kx + CHUNK].try_into().expect("slack columns");
                                    for (b, a) in acc.iter_mut().enumerate().take(nb) {
                                        let wv = wt[((co0 + b) * g.ci + c) * kk + ky * g.kw + kx];
                                        for i in 0..CHUNK {
                                            a[i] += wv * s[i];
                                        }
                                    }
                                }
                            }
                        }
                        let width = CHUNK.min(g.ow - ox0);
                        for (b, a) in acc.iter().enumerate().take(nb) {
                            let base = (n * g.co + co0 + b) * ohw + oy * g.ow + ox0;
                            out[base..base + width].copy_from_slice(&a[..width]);
                        }
                    }
                }
            }
        }
        return out;
    }
    for n in 0..g.n {
        for co in 0..g.co {
            let dst = &mut out[(n * g.co + co) * ohw..(n * g.co + co + 1) * ohw];
            for c in 0..g.ci {
                let src = &x[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
                let wk = &wt[(co * g.ci + c) * kk..(co * g.ci + c + 1) * kk];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad) else {
                                continue;
                            };
                            if iy >= g.h {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad) else {
                                    continue;
                                };
                                if ix < g.w {
                                    acc += wk[ky * g.kw + kx] * src[iy * g.w + ix];
                                }
                            }
                        }
                        dst[oy * g.ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient for stride 1, accumulating in independent lanes.
fn conv2d_weight_grad_s1(x: &[f64], gout: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut dw = vec![0.0; g.co * g.ci * kk];
    let full = g.ow / LANES * LANES;
    for n in 0..g.n {
        let (xp, ph, pw) = pad_planes(&x[n * g.ci * hw..(n + 1) * g.ci * hw], g);
        for co in 0..g.co {
            let go = &gout[(n * g.co + co) * ohw..(n * g.co + co + 1) * ohw];
            for c in 0..g.ci {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut lanes = [0.0f64; LANES];
                        let mut tail = 0.0;
                        for oy in 0..g.oh {
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &xp[(c * ph + oy + ky) * pw + kx..];
                            for (gc, xc) in grow[..full]
                                .chunks_exact(LANES)
                                .zip(xrow[..full].chunks_exact(LANES))
                            {
                                for l in 0..LANES {
                                    lanes[l] += gc[l] * xc[l];
                                }
                            }
                            for ox in full..g.ow {
                                tail += grow[ox] * xrow[ox];
                            }
                        }
                        dw[(co * g.ci + c) * kk + ky * g.kw + kx] += lanes.iter().sum::<f64>() + tail;
                    }
                }
            }
        }
    }
    dw
}

fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &Conv2dGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if g.stride == 1 && !need_x {
        return (None, need_w.then(|| conv2d_weight_grad_s1(x, gout, g)));
    }
    conv2d_backward_generic(x, wt, gout, g, need_x, need_w)
}

fn conv2d_backward_generic(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &Conv2dGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; wt.len()]);
    for n in 0..g.n {
        for co in 0..g.co {
            let go = &gout[(n * g.co + co) * ohw..(n * g.co + co + 1) * ohw];
            for c in 0..g.ci {
                let xs = &x[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
                let wbase = (co * g.ci + c) * kk;
                let xbase = (n * g.ci + c) * hw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[wbase + ky * g.kw + kx];
                        let mut acc = 0.0;
                        if g.stride == 1 {
                            let (oy0, oy1) = g.oy_range(ky);
                            let (ox0, ox1) = g.ox_range(kx);
                            let width = ox1 - ox0;
                            let rows = if width == 0 { 0..0 } else { oy0..oy1 };
                            for oy in rows {
                                let iy = oy + ky - g.pad;
                                let ix0 = ox0 + kx - g.pad;
                                let grow = &go[oy * g.ow + ox0..oy * g.ow + ox1];
                                if need_w {
                                    let xrow = &xs[iy * g.w + ix0..iy * g.w + ix0 + width];
                                    acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let drow = &mut dx[xbase + iy * g.w + ix0..xbase + iy * g.w + ix0 + width];
                                    for (d, gv) in drow.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        } else {
                            for oy in 0..g.oh {
                                let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad) else {
                                    continue;
                                };
                                if iy >= g.h {
                                    continue;
                                }
                                for ox in 0..g.ow {
                                    let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad) else {
                                        continue;
                                    };
                                    if ix >= g.w {
                                        continue;
                                    }
                                    let gv = go[oy * g.ow + ox];
                                    acc += gv * xs[iy * g.w + ix];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xbase + iy * g.w + ix] += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wbase + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy)]
struct Conv1dGeom {
    n: usize,
    ci: usize,
    t: usize,
    co: usize,
    k: usize,
    groups: usize,
    pad_left: usize,
    ot: usize,
}

impl Conv1dGeom {
    fn cig(&self) -> usize {
        self.ci / self.groups
    }

    fn cog(&self) -> usize {
        self.co / self.groups
    }

    /// Input time index feeding output `o` through tap `k`, if in range.
    fn src(&self, o: usize, k: usize) -> Option<usize> {
        (o + k).checked_sub(self.pad_left).filter(|&i| i < self.t)
    }
}

fn conv1d_forward(x: &[f64], wt: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let (cig, cog) = (g.cig(), g.cog());
    let mut out = vec![0.0; g.n * g.co * g.ot];
    for n in 0..g.n {
        for co in 0..g.co {
            let grp = co / cog;
            let dst = &mut out[(n * g.co + co) * g.ot..(n * g.co + co + 1) * g.ot];
            for cl in 0..cig {
                let c = grp * cig + cl;
                let src = &x[(n * g.ci + c) * g.t..(n * g.ci + c + 1) * g.t];
                for k in 0..g.k {
                    let wv = wt[(co * cig + cl) * g.k + k];
                    for (o, d) in dst.iter_mut().enumerate() {
                        if let Some(i) = g.src(o, k) {
                            *d += wv * src[i];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv1d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &Conv1dGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cig, cog) = (g.cig(), g.cog());
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; wt.len()]);
    for n in 0..g.n {
        for co in 0..g.co {
            let grp = co / cog;
            let go = &gout[(n * g.co + co) * g.ot..(n * g.co + co + 1) * g.ot];
            for cl in 0..cig {
                let c = grp * cig + cl;
                let xb = (n * g.ci + c) * g.t;
                for k in 0..g.k {
                    let widx = (co * cig + cl) * g.k + k;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for (o, &gv) in go.iter().enumerate() {
                        if let Some(i) = g.src(o, k) {
                            acc += gv * x[xb + i];
                            if let Some(dx) = dx.as_mut() {
                                dx[xb + i] += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn flat(a: &Array) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

fn shaped(shape: &[usize], data: Vec<f64>) -> Array {
    Array::from_shape_vec(IxDyn(shape), data).expect("shape/data length agree")
}

/// Per-channel statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running estimates.
    pub var: Vec<f64>,
}

impl Graph {
    /// 2-D cross-correlation of `x: [N, Ci, H, W]` with `w: [Co, Ci, kh, kw]`
    /// using symmetric zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!("conv2d kernel {kh}x{kw} larger than padded input {xs:?}")));
        }
        let geom = Conv2dGeom {
            n: xs[0],
            ci: xs[1],
            h,
            w: wd,
            co: ws[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = conv2d_forward(&flat(&self.value(x)), &flat(&self.value(w)), &geom);
        let out_shape = [geom.n, geom.co, geom.oh, geom.ow];
        Ok(self.custom(&[x, w], shaped(&out_shape, out), move |g, p, _, need| {
            let (dx, dw) = conv2d_backward(&flat(p[0]), &flat(p[1]), &flat(g), &geom, need[0], need[1]);
            vec![
                dx.map(|d| shaped(p[0].shape(), d)),
                dw.map(|d| shaped(p[1].shape(), d)),
            ]
        }))
    }

    /// Grouped 1-D cross-correlation of `x: [N, Ci, T]` with
    /// `w: [Co, Ci / groups, k]` and asymmetric zero padding.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        pad_left: usize,
        pad_right: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let valid = xs.len() == 3
            && ws.len() == 3
            && groups > 0
            && xs[1] % groups == 0
            && ws[0] % groups == 0
            && ws[1] * groups == xs[1]
            && xs[2] + pad_left + pad_right >= ws[2];
        if !valid {
            return Err(Error::shape(format!(
                "conv1d input {xs:?} with weight {ws:?} (groups {groups})"
            )));
        }
        let geom = Conv1dGeom {
            n: xs[0],
            ci: xs[1],
            t: xs[2],
            co: ws[0],
            k: ws[2],
            groups,
            pad_left,
            ot: xs[2] + pad_left + pad_right + 1 - ws[2],
        };
        let out = conv1d_forward(&flat(&self.value(x)), &flat(&self.value(w)), &geom);
        let out_shape = [geom.n, geom.co, geom.ot];
        Ok(self.custom(&[x, w], shaped(&out_shape, out), move |g, p, _, need| {
            let (dx, dw) = conv1d_backward(&flat(p[0]), &flat(p[1]), &flat(g), &geom, need[0], need[1]);
            vec![
                dx.map(|d| shaped(p[0].shape(), d)),
                dw.map(|d| shaped(p[1].shape(), d)),
            ]
        }))
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied (mean, variance) pair normalizes the input.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape(format!("batch_norm axis {axis} for {shape:?}")));
        }
        let (outer, c, inner) = split_at_axis(&shape, axis);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch_norm affine terms must have shape [{c}]")));
        }
        let count = outer * inner;
        let data = flat(&self.value(x));
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("running statistics length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(Error::input("batch_norm needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let row = &data[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        *m += row.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for ch in 0..c {
                        let row = &data[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased = var.iter().map(|v| v / (count - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gam = flat(&self.value(gamma));
        let bet = flat(&self.value(beta));
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = gam[ch] * xhat[i] + bet[ch];
                }
            }
        }
        let train = running.is_none();
        let y = self.custom(&[x, gamma, beta], shaped(&shape, out), move |g, p, _, need| {
            let gv = flat(g);
            let gam = flat(p[1]);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        sum_g[ch] += gv[i];
                        sum_gx[ch] += gv[i] * xhat[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; gv.len()];
                let m = count as f64;
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + inner {
                            dx[i] = if train {
                                k * (gv[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * gv[i]
                            };
                        }
                    }
                }
                shaped(p[0].shape(), dx)
            });
            vec![
                dx,
                need[1].then(|| shaped(&[c], sum_gx)),
                need[2].then(|| shaped(&[c], sum_g)),
            ]
        });
        Ok((y, stats))
    }
}
