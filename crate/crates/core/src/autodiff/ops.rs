use ndarray::{concatenate, Axis, Ix2, IxDyn, Slice};

use super::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Split a shape around `axis` into (outer, len, inner) extents of a
/// row-major buffer.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn contiguous(a: &Array) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Array {
    Array::from_shape_vec(IxDyn(shape), data).expect("shape/data length agree")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

impl Graph {
    fn binary_check(&self, a: Var, b: Var) -> Result<()> {
        broadcast_shape(&self.shape(a), &self.shape(b)).map(|_| ())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b)?;
        let value = &*self.value(a) + &*self.value(b);
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(g, p[0].shape())),
                    need[1].then(|| reduce_to(g, p[1].shape())),
                ]
            }),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b)?;
        let value = &*self.value(a) - &*self.value(b);
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(g, p[0].shape())),
                    need[1].then(|| -reduce_to(g, p[1].shape())),
                ]
            }),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b)?;
        let value = &*self.value(a) * &*self.value(b);
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(&(g * p[1]), p[0].shape())),
                    need[1].then(|| reduce_to(&(g * p[0]), p[1].shape())),
                ]
            }),
        ))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b)?;
        let value = &*self.value(a) / &*self.value(b);
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(|g, p, out, need| {
                vec![
                    need[0].then(|| reduce_to(&(g / p[1]), p[0].shape())),
                    need[1].then(|| reduce_to(&(-(g * out) / p[1]), p[1].shape())),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = &*self.value(a) * factor;
        self.push_op(value, &[a], Box::new(move |g, _, _, _| vec![Some(g * factor)]))
    }

    pub fn add_scalar(&self, a: Var, offset: f64) -> Var {
        let value = &*self.value(a) + offset;
        self.push_op(value, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push_op(
            value,
            &[a],
            Box::new(|g, p, _, _| {
                let mut out = g.clone();
                out.zip_mut_with(p[0], |o, &x| {
                    if x <= 0.0 {
                        *o = 0.0
                    }
                });
                vec![Some(out)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push_op(
            value,
            &[a],
            Box::new(|g, _, out, _| vec![Some(g * &out.mapv(|s| s * (1.0 - s)))]),
        )
    }

    /// x * sigmoid(x)
    pub fn silu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push_op(
            value,
            &[a],
            Box::new(|g, p, _, _| {
                let d = p[0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![Some(g * &d)]
            }),
        )
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push_op(
            value,
            &[a],
            Box::new(|g, p, _, _| vec![Some(g * &p[0].mapv(sigmoid))]),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push_op(value, &[a], Box::new(|g, _, out, _| vec![Some(g * out)]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = Array::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push_op(
            value,
            &[a],
            Box::new(|g, p, _, _| {
                let s = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(Array::from_elem(p[0].raw_dim(), s))]
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the listed axes, keeping them as size-1 dimensions.
    pub fn mean_axes_keep(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::shape(format!("axes {axes:?} out of range for {shape:?}")));
        }
        let mut value = self.value(a).clone();
        let mut count = 1usize;
        for &ax in axes {
            count *= shape[ax];
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        value /= count as f64;
        Ok(self.push_op(
            value,
            &[a],
            Box::new(move |g, p, _, _| {
                let full = g.broadcast(p[0].raw_dim()).expect("keepdims broadcast").to_owned();
                vec![Some(full / count as f64)]
            }),
        ))
    }

    /// Sum over one axis, keeping it as a size-1 dimension.
    pub fn sum_axis_keep(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let value = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Ok(self.push_op(
            value,
            &[a],
            Box::new(|g, p, _, _| {
                vec![Some(g.broadcast(p[0].raw_dim()).expect("keepdims broadcast").to_owned())]
            }),
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        if src.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("cannot reshape {src:?} into {shape:?}")));
        }
        let value = from_vec(shape, contiguous(&self.value(a)));
        Ok(self.push_op(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(from_vec(&src, contiguous(g)))]),
        ))
    }

    pub fn permute(&self, a: Var, order: &[usize]) -> Result<Var> {
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if order.len() != nd || order.iter().any(|&o| o >= nd || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::shape(format!("invalid permutation {order:?} for rank {nd}")));
        }
        let value = self
            .value(a)
            .clone()
            .permuted_axes(IxDyn(order))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; nd];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        Ok(self.push_op(
            value,
            &[a],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    g.clone()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose_last needs rank >= 2"));
        }
        let mut order: Vec<usize> = (0..nd).collect();
        order.swap(nd - 1, nd - 2);
        self.permute(a, &order)
    }

    /// Reverse the order of elements along `axis`.
    pub fn flip(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let flip = move |x: &Array| {
            x.slice_axis(Axis(axis), Slice::new(0, None, -1))
                .as_standard_layout()
                .into_owned()
        };
        let value = flip(&self.value(a));
        Ok(self.push_op(value, &[a], Box::new(move |g, _, _, _| vec![Some(flip(g))])))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Ok(self.push_op(
            value,
            &[a],
            Box::new(move |g, p, _, _| {
                let mut out = Array::zeros(p[0].raw_dim());
                out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(out)]
            }),
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            concatenate(Axis(axis), &views).map_err(|e| Error::shape(e.to_string()))?
        };
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        Ok(self.push_op(
            value,
            parts,
            Box::new(move |g, _, _, need| {
                let mut start = 0;
                lens.iter()
                    .zip(need)
                    .map(|(&len, &n)| {
                        let piece = n.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + len))
                                .to_owned()
                        });
                        start += len;
                        piece
                    })
                    .collect()
            }),
        ))
    }

    /// `x[..., K] @ w[K, M] -> [..., M]`.
    pub fn matmul(&self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape(format!("matmul {xs:?} x {ws:?}")));
        }
        let k = ws[0];
        let m = ws[1];
        let rows = xs.iter().product::<usize>() / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = m;
        let value = {
            let xv = self.value(x);
            let x2 = xv.as_standard_layout();
            let x2 = x2.view().into_shape_with_order((rows, k)).expect("row-major");
            let w2 = self.value(w);
            let w2 = w2.view().into_dimensionality::<Ix2>().expect("rank 2");
            from_vec(&out_shape, x2.dot(&w2).into_raw_vec_and_offset().0)
        };
        Ok(self.push_op(
            value,
            &[x, w],
            Box::new(move |g, p, _, need| {
                let g2 = g.as_standard_layout();
                let g2 = g2.view().into_shape_with_order((rows, m)).expect("row-major");
                let w2 = p[1].view().into_dimensionality::<Ix2>().expect("rank 2");
                let dx = need[0].then(|| {
                    from_vec(&xs, g2.dot(&w2.t()).as_standard_layout().iter().copied().collect())
                });
                let dw = need[1].then(|| {
                    let x2 = p[0].as_standard_layout();
                    let x2 = x2.view().into_shape_with_order((rows, k)).expect("row-major");
                    x2.t().dot(&g2).into_dyn()
                });
                vec![dx, dw]
            }),
        ))
    }

    /// `x[..., K] @ w[K, M] + b[M]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Maximum along `axis` (axis removed).
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!("max over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let data = contiguous(&self.value(a));
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push_op(
            from_vec(&out_shape, out),
            &[a],
            Box::new(move |g, _, _, _| {
                let gv = contiguous(g);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        dx[(o * len + arg[slot]) * inner + i] = gv[slot];
                    }
                }
                vec![Some(from_vec(&shape, dx))]
            }),
        ))
    }

    /// Non-overlapping mean pooling by `factor` along `axis`.
    pub fn avg_pool_axis(&self, a: Var, axis: usize, factor: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || factor == 0 || shape[axis] % factor != 0 {
            return Err(Error::input(format!(
                "axis {axis} of {shape:?} is not divisible by pooling factor {factor}"
            )));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let olen = len / factor;
        let scale = 1.0 / factor as f64;
        let data = contiguous(&self.value(a));
        let mut out = vec![0.0; outer * olen * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[(o * olen + l / factor) * inner..(o * olen + l / factor + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = olen;
        Ok(self.push_op(
            from_vec(&out_shape, out),
            &[a],
            Box::new(move |g, _, _, _| {
                let gv = contiguous(g);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &gv[(o * olen + l / factor) * inner..(o * olen + l / factor + 1) * inner];
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                vec![Some(from_vec(&shape, dx))]
            }),
        ))
    }

    /// Linear interpolation to twice the length along `axis`, sampling at
    /// half-pixel centers with edge clamping.
    pub fn upsample_linear2x(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!("upsample axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let taps = upsample_taps(len);
        let data = contiguous(&self.value(a));
        let mut out = vec![0.0; outer * 2 * len * inner];
        for o in 0..outer {
            for (j, &(i0, w0, i1, w1)) in taps.iter().enumerate() {
                let dst = (o * 2 * len + j) * inner;
                let s0 = (o * len + i0) * inner;
                let s1 = (o * len + i1) * inner;
                for i in 0..inner {
                    out[dst + i] = w0 * data[s0 + i] + w1 * data[s1 + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 2 * len;
        Ok(self.push_op(
            from_vec(&out_shape, out),
            &[a],
            Box::new(move |g, _, _, _| {
                let gv = contiguous(g);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (j, &(i0, w0, i1, w1)) in taps.iter().enumerate() {
                        let src = (o * 2 * len + j) * inner;
                        let d0 = (o * len + i0) * inner;
                        let d1 = (o * len + i1) * inner;
                        for i in 0..inner {
                            dx[d0 + i] += w0 * gv[src + i];
                            dx[d1 + i] += w1 * gv[src + i];
                        }
                    }
                }
                vec![Some(from_vec(&shape, dx))]
            }),
        ))
    }

    /// 2x2 max pooling with stride 2 over the last two axes of `[N, C, H, W]`.
    pub fn max_pool2d(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::input(format!(
                "max_pool2d needs [N, C, H, W] with even H and W, got {shape:?}"
            )));
        }
        let planes = shape[0] * shape[1];
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = contiguous(&self.value(a));
        let mut out = vec![0.0; planes * oh * ow];
        let mut arg = vec![0u32; planes * oh * ow];
        for p in 0..planes {
            let src = &data[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        let out_shape = vec![shape[0], shape[1], oh, ow];
        Ok(self.push_op(
            from_vec(&out_shape, out),
            &[a],
            Box::new(move |g, _, _, _| {
                let gv = contiguous(g);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..oh * ow {
                        let o = p * oh * ow + i;
                        dx[p * h * w + arg[o] as usize] += gv[o];
                    }
                }
                vec![Some(from_vec(&shape, dx))]
            }),
        ))
    }

    /// Record an operation with a caller-supplied backward rule.
    pub fn custom(
        &self,
        parents: &[Var],
        value: Array,
        backward: impl Fn(&Array, &[&Array], &Array, &[bool]) -> Vec<Option<Array>> + 'static,
    ) -> Var {
        self.push_op(value, parents, Box::new(backward))
    }
}

/// Source taps `(i0, w0, i1, w1)` for each output index of a 2x linear
/// upsampling of a length-`len` sequence.
fn upsample_taps(len: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..2 * len)
        .map(|j| {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, 1.0 - frac, i1, frac)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
