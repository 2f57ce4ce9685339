//! Forward kernels recorded on the tape and their reverse-mode rules.

use super::tape::{accumulate, Tape, Var};
use super::{shape_err, strides_of, Result, Tensor, TensorError};
use crate::scalar::{gemm, MatRef};
use crate::Scalar;

pub(crate) enum Op<S> {
    Leaf,
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Repeat { x: Var, axis: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Dense { x: Var, w: Var, b: Option<Var> },
    Bmm(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    InstanceNorm { x: Var, inv_std: Vec<S> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis { x: Var, axis: usize },
    AvgPool2(Var),
    Bilinear { map: Var, coords: Var },
    Bce { v: Var, target: Vec<S>, eps: S },
    SoftmaxCe { logits: Var, targets: Vec<Option<usize>>, probs: Vec<S> },
}

impl<S> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Reshape(x) | Permute(x, _) | Scale(x, _) | Relu(x) | Gelu(x) | Sigmoid(x) | Softmax(x)
            | Abs(x) | SumAll(x) | MeanAll(x) | AvgPool2(x) => vec![*x],
            Narrow { x, .. } | Repeat { x, .. } | InstanceNorm { x, .. } | MeanAxis { x, .. } => {
                vec![*x]
            }
            Concat { xs, .. } => xs.clone(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Bmm(a, b) => vec![*a, *b],
            Dense { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Bilinear { map, coords } => vec![*map, *coords],
            Bce { v, .. } => vec![*v],
            SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    let rows = if last_len == 0 { 0 } else { data.len() / last_len };
    for _ in 0..rows {
        for i in 0..last_len {
            out.push(data[off + i * last_stride]);
        }
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let value = half * x * (S::one() + th);
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    let deriv = half * (S::one() + th) + half * x * (S::one() - th * th) * du;
    (value, deriv)
}

#[inline]
fn lerp<S: Scalar>(a: S, b: S, w: S) -> S {
    if w == S::zero() {
        a
    } else {
        a * (S::one() - w) + b * w
    }
}

/// Clamped bilinear footprint of a sample point on an `h x w` grid.
struct Footprint<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: S,
    wy: S,
    x_inside: bool,
    y_inside: bool,
}

fn footprint<S: Scalar>(x: S, y: S, h: usize, w: usize) -> Footprint<S> {
    let xmax = S::lit((w - 1) as f64);
    let ymax = S::lit((h - 1) as f64);
    let xc = x.max(S::zero()).min(xmax);
    let yc = y.max(S::zero()).min(ymax);
    let x0 = xc.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = yc.floor().to_usize().unwrap_or(0).min(h - 1);
    Footprint {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        wx: xc - S::lit(x0 as f64),
        wy: yc - S::lit(y0 as f64),
        x_inside: x > S::zero() && x < xmax,
        y_inside: y > S::zero() && y < ymax,
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    img: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let plane = ho * wo;
    for c in 0..cin {
        let src = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { S::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [S],
) {
    let plane = ho * wo;
    for c in 0..cin {
        let dst = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation of rank {}", shape.len()),
            });
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        self.push("permute", Tensor::new(&out_shape, data)?, Op::Permute(x, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Invalid { op: "transpose", msg: "rank < 2".into() });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            });
        }
        let (outer, size, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", Tensor::new(&out_shape, data)?, Op::Narrow { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid { op: "concat", msg: format!("axis {axis} out of range") });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", format!("all axes except {axis}"), &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * n..(o + 1) * n]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        self.push("concat", Tensor::new(&out_shape, data)?, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Inserts a new axis at `axis` holding `n` copies of `x`.
    pub fn repeat_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(TensorError::Invalid { op: "repeat", msg: format!("axis {axis} out of range") });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        self.push("repeat", Tensor::new(&out_shape, data)?, Op::Repeat { x, axis, n })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, "all axes", sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(sa, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let src = self.value(x);
        let v = Tensor::new(src.shape(), src.data().iter().map(|&a| a * c).collect())?;
        self.push("scale", v, Op::Scale(x, c))
    }

    /// Affine map on the last axis: `x [..., din] -> x * w^T + b`, `w: [dout, din]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(shape_err("dense", "input last axis vs weight axis 1", &ws, &xs));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("dense", "bias axis 0", &[dout], self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![S::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), rows, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            S::one(),
            &mut out,
        );
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        self.push("dense", Tensor::new(&out_shape, out)?, Op::Dense { x, w, b })
    }

    /// Batched matrix product `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", "batch and inner axes", &sa, &sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push("bmm", Tensor::new(&[g, m, n], out)?, Op::Bmm(a, b))
    }

    /// 2-D cross-correlation, `x: [b, cin, h, w]`, `w: [cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", "rank", &[4, 4], &[xs.len(), ws.len()]));
        }
        if xs[1] != ws[1] {
            return Err(shape_err("conv2d", "input channels (input axis 1 vs kernel axis 1)", &ws[1..2], &xs[1..2]));
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid { op: "conv2d", msg: format!("kernel {kh}x{kw} must be odd") });
        }
        let (Some(ho), Some(wo)) = (conv_out_dim(h, kh, stride, pad), conv_out_dim(wd, kw, stride, pad)) else {
            return Err(shape_err("conv2d", "spatial axes 2,3 smaller than kernel", &[kh, kw], &xs[2..]));
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", "bias axis 0", &[cout], self.shape(b)));
            }
        }
        let ckk = cin * kh * kw;
        let plane = ho * wo;
        let mut cols = vec![S::zero(); ckk * plane];
        let mut out = vec![S::zero(); bsz * cout * plane];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for bi in 0..bsz {
            im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
            let dst = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    dst[co * plane..(co + 1) * plane].fill(bv);
                }
            }
            gemm(MatRef::new(wdat, cout, ckk), MatRef::new(&cols, ckk, plane), S::one(), dst);
        }
        self.push("conv2d", Tensor::new(&[bsz, cout, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Per-sample, per-channel normalization over the spatial axes of `[b, c, h, w]`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("instance_norm", "rank", &[4], &[xs.len()]));
        }
        let plane = xs[2] * xs[3];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        let n = S::lit(plane as f64);
        for chunk in src.chunks(plane) {
            let mean = chunk.iter().copied().sum::<S>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + S::lit(eps)).sqrt();
            inv_std.push(is);
            out.extend(chunk.iter().map(|&v| (v - mean) * is));
        }
        self.push("instance_norm", Tensor::new(&xs, out)?, Op::InstanceNorm { x, inv_std })
    }

    /// Normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(TensorError::Invalid { op: "layer_norm", msg: "rank 0".into() })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", "scale/shift axis 0", &[d], self.shape(gamma)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let n = S::lit(d as f64);
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / d.max(1));
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + S::lit(eps)).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        self.push("layer_norm", Tensor::new(&xs, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let src = self.value(x);
        let v = Tensor::new(src.shape(), src.data().iter().map(|&a| f(a)).collect())?;
        self.push(name, v, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |a| a.max(S::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |a| gelu_parts(a).0, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |a| S::one() / (S::one() + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |a| a.abs(), Op::Abs(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let d = *src.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d.max(1)) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - m).exp()));
            let z: S = out[start..].iter().copied().sum();
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let v = Tensor::new(src.shape(), out)?;
        self.push("softmax", v, Op::Softmax(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum() / S::lit(v.len().max(1) as f64);
        self.push("mean", Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid { op: "mean_axis", msg: format!("axis {axis} out of range") });
        }
        let (outer, size, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = S::one() / S::lit(size.max(1) as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for s in 0..size {
                let row = &src[(o * size + s) * inner..(o * size + s + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("mean_axis", Tensor::new(&out_shape, out)?, Op::MeanAxis { x, axis })
    }

    /// 2x2 mean pooling over the last two axes. Odd sizes are edge-replicated
    /// to even first.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(TensorError::Invalid { op: "avg_pool2", msg: "rank < 2".into() });
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let planes = self.value(x).len() / (h * w).max(1);
        let src = self.value(x).data();
        let quarter = S::lit(0.25);
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let m = &src[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                let (r0, r1) = (2 * i, (2 * i + 1).min(h - 1));
                for j in 0..wo {
                    let (c0, c1) = (2 * j, (2 * j + 1).min(w - 1));
                    out.push((m[r0 * w + c0] + m[r0 * w + c1] + m[r1 * w + c0] + m[r1 * w + c1]) * quarter);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.push("avg_pool2", Tensor::new(&out_shape, out)?, Op::AvgPool2(x))
    }

    /// Bilinear lookup `map: [g, c, h, w]` at `coords: [g, n, 2]` (x, y in
    /// cells) giving `[g, n, c]`. Coordinates are clamped to the grid.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let cs = self.shape(coords).to_vec();
        if ms.len() != 4 || cs.len() != 3 || cs[2] != 2 || cs[0] != ms[0] {
            return Err(shape_err("bilinear_sample", "map [g,c,h,w] vs coords [g,n,2]", &ms, &cs));
        }
        let (g, c, h, w) = (ms[0], ms[1], ms[2], ms[3]);
        let n = cs[1];
        let md = self.value(map).data();
        let cd = self.value(coords).data();
        let mut out = Vec::with_capacity(g * n * c);
        for gi in 0..g {
            let maps = &md[gi * c * h * w..(gi + 1) * c * h * w];
            for ni in 0..n {
                let base = (gi * n + ni) * 2;
                let fp = footprint(cd[base], cd[base + 1], h, w);
                for ci in 0..c {
                    let m = &maps[ci * h * w..(ci + 1) * h * w];
                    let top = lerp(m[fp.y0 * w + fp.x0], m[fp.y0 * w + fp.x1], fp.wx);
                    let bot = lerp(m[fp.y1 * w + fp.x0], m[fp.y1 * w + fp.x1], fp.wx);
                    out.push(lerp(top, bot, fp.wy));
                }
            }
        }
        self.push("bilinear_sample", Tensor::new(&[g, n, c], out)?, Op::Bilinear { map, coords })
    }

    /// Mean binary cross-entropy of probabilities `v` against `target`, with
    /// `v` clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, v: Var, target: &[S], eps: f64) -> Result<Var> {
        let vd = self.value(v).data();
        if vd.len() != target.len() {
            return Err(shape_err("bce", "element count", &[vd.len()], &[target.len()]));
        }
        let eps = S::lit(eps);
        let n = S::lit(vd.len().max(1) as f64);
        let mut acc = S::zero();
        for (&p, &y) in vd.iter().zip(target) {
            let p = p.max(eps).min(S::one() - eps);
            acc += y * p.ln() + (S::one() - y) * (S::one() - p).ln();
        }
        self.push("bce", Tensor::scalar(-acc / n), Op::Bce { v, target: target.to_vec(), eps })
    }

    /// Mean softmax cross-entropy of `logits: [r, q]` over rows with a target
    /// class; rows with `None` are skipped. Zero when no row contributes.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(shape_err("softmax_ce", "rows", &[targets.len()], &ls));
        }
        let q = ls[1];
        if targets.iter().flatten().any(|&t| t >= q) {
            return Err(TensorError::Invalid { op: "softmax_ce", msg: format!("target class out of 0..{q}") });
        }
        let data = self.value(logits).data();
        let mut probs = vec![S::zero(); data.len()];
        let mut acc = S::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &data[r * q..(r + 1) * q];
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let z: S = row.iter().map(|&v| (v - m).exp()).sum();
            for (p, &v) in probs[r * q..(r + 1) * q].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            acc += m + z.ln() - row[t];
            count += 1;
        }
        let loss = if count == 0 { S::zero() } else { acc / S::lit(count as f64) };
        self.push("softmax_ce", Tensor::scalar(loss), Op::SoftmaxCe { logits, targets: targets.to_vec(), probs })
    }
}

pub(crate) fn backward<S: Scalar>(
    tape: &Tape<S>,
    idx: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let node = &tape.nodes[idx];
    let out = &node.value;
    let val = |v: Var| tape.value(v);
    let gd = g.data();
    let acc = |v: Var, t: Tensor<S>, grads: &mut [Option<Tensor<S>>]| accumulate(tape, grads, v, t);
    let like = |v: Var, data: Vec<S>| Tensor::new(tape.shape(v), data).expect("gradient shape");

    match &node.op {
        Op::Leaf => {}
        Op::Reshape(x) => acc(*x, like(*x, gd.to_vec()), grads),
        Op::Permute(x, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let (_, data) = permute_data(gd, out.shape(), &inv);
            acc(*x, like(*x, data), grads);
        }
        Op::Narrow { x, axis, start } => {
            let shape = tape.shape(*x);
            let (outer, size, inner) = split_at_axis(shape, *axis);
            let len = out.shape()[*axis];
            let mut data = vec![S::zero(); val(*x).len()];
            for o in 0..outer {
                let dst = (o * size + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            acc(*x, like(*x, data), grads);
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_at_axis(out.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let n = tape.shape(v)[*axis];
                let mut data = Vec::with_capacity(val(v).len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&gd[base..base + n * inner]);
                }
                offset += n;
                acc(v, like(v, data), grads);
            }
        }
        Op::Repeat { x, axis, n } => {
            let shape = tape.shape(*x);
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis..].iter().product();
            let mut data = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for r in 0..*n {
                    let src = &gd[(o * n + r) * inner..(o * n + r + 1) * inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            acc(*x, like(*x, data), grads);
        }
        Op::Add(a, b) => {
            acc(*a, g.clone(), grads);
            acc(*b, g.clone(), grads);
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone(), grads);
            acc(*b, like(*b, gd.iter().map(|&v| -v).collect()), grads);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            acc(*a, like(*a, gd.iter().zip(bd).map(|(&g, &y)| g * y).collect()), grads);
            acc(*b, like(*b, gd.iter().zip(ad).map(|(&g, &x)| g * x).collect()), grads);
        }
        Op::Scale(x, c) => acc(*x, like(*x, gd.iter().map(|&v| v * *c).collect()), grads),
        Op::Dense { x, w, b } => {
            let ws = tape.shape(*w);
            let (dout, din) = (ws[0], ws[1]);
            let rows = val(*x).len() / din.max(1);
            let gm = MatRef::new(gd, rows, dout);
            if tape.requires_grad(*x) {
                let mut dx = vec![S::zero(); rows * din];
                gemm(gm, MatRef::new(val(*w).data(), dout, din), S::zero(), &mut dx);
                acc(*x, like(*x, dx), grads);
            }
            if tape.requires_grad(*w) {
                let mut dw = vec![S::zero(); dout * din];
                gemm(gm.t(), MatRef::new(val(*x).data(), rows, din), S::zero(), &mut dw);
                acc(*w, like(*w, dw), grads);
            }
            if let Some(b) = b {
                let mut db = vec![S::zero(); dout];
                for row in gd.chunks(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, like(*b, db), grads);
            }
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (gn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if tape.requires_grad(*a) {
                let mut da = vec![S::zero(); gn * m * k];
                for i in 0..gn {
                    gemm(
                        MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                        MatRef::new(&bd[i * k * n..(i + 1) * k * n], k, n).t(),
                        S::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                acc(*a, like(*a, da), grads);
            }
            if tape.requires_grad(*b) {
                let mut db = vec![S::zero(); gn * k * n];
                for i in 0..gn {
                    gemm(
                        MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k).t(),
                        MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                        S::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                acc(*b, like(*b, db), grads);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = tape.shape(*x);
            let ws = tape.shape(*w);
            let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let ckk = cin * kh * kw;
            let plane = ho * wo;
            let xd = val(*x).data();
            let wdat = val(*w).data();
            let need_x = tape.requires_grad(*x);
            let need_w = tape.requires_grad(*w);
            let mut dx = if need_x { vec![S::zero(); xd.len()] } else { vec![] };
            let mut dw = vec![S::zero(); if need_w { wdat.len() } else { 0 }];
            let mut cols = vec![S::zero(); ckk * plane];
            let mut dcols = vec![S::zero(); if need_x { ckk * plane } else { 0 }];
            for bi in 0..bsz {
                let gb = &gd[bi * cout * plane..(bi + 1) * cout * plane];
                let img = bi * cin * h * wd..(bi + 1) * cin * h * wd;
                if need_w {
                    im2col(&xd[img.clone()], cin, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                    gemm(MatRef::new(gb, cout, plane), MatRef::new(&cols, ckk, plane).t(), S::one(), &mut dw);
                }
                if need_x {
                    gemm(MatRef::new(wdat, cout, ckk).t(), MatRef::new(gb, cout, plane), S::zero(), &mut dcols);
                    col2im_add(&dcols, cin, h, wd, kh, kw, *stride, *pad, ho, wo, &mut dx[img]);
                }
            }
            if need_x {
                acc(*x, like(*x, dx), grads);
            }
            if need_w {
                acc(*w, like(*w, dw), grads);
            }
            if let Some(b) = b {
                let mut db = vec![S::zero(); cout];
                for bi in 0..bsz {
                    for (co, d) in db.iter_mut().enumerate() {
                        let start = (bi * cout + co) * plane;
                        *d += gd[start..start + plane].iter().copied().sum::<S>();
                    }
                }
                acc(*b, like(*b, db), grads);
            }
        }
        Op::InstanceNorm { x, inv_std } => {
            let xs = tape.shape(*x);
            let plane = xs[2] * xs[3];
            let n = S::lit(plane as f64);
            let y = out.data();
            let mut dx = Vec::with_capacity(y.len());
            for (p, &is) in inv_std.iter().enumerate() {
                let gp = &gd[p * plane..(p + 1) * plane];
                let yp = &y[p * plane..(p + 1) * plane];
                let mg = gp.iter().copied().sum::<S>() / n;
                let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<S>() / n;
                dx.extend(gp.iter().zip(yp).map(|(&gv, &yv)| is * (gv - mg - yv * mgy)));
            }
            acc(*x, like(*x, dx), grads);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = tape.shape(*gamma)[0];
            let gam = val(*gamma).data();
            let n = S::lit(d as f64);
            let mut dx = Vec::with_capacity(xhat.len());
            let mut dgamma = vec![S::zero(); d];
            let mut dbeta = vec![S::zero(); d];
            for (r, &is) in inv_std.iter().enumerate() {
                let gr = &gd[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut m1 = S::zero();
                let mut m2 = S::zero();
                for i in 0..d {
                    let dh = gr[i] * gam[i];
                    m1 += dh;
                    m2 += dh * hr[i];
                    dgamma[i] += gr[i] * hr[i];
                    dbeta[i] += gr[i];
                }
                m1 /= n;
                m2 /= n;
                for i in 0..d {
                    dx.push(is * (gr[i] * gam[i] - m1 - hr[i] * m2));
                }
            }
            acc(*x, like(*x, dx), grads);
            acc(*gamma, like(*gamma, dgamma), grads);
            acc(*beta, like(*beta, dbeta), grads);
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            let dx = gd.iter().zip(xd).map(|(&g, &v)| if v > S::zero() { g } else { S::zero() }).collect();
            acc(*x, like(*x, dx), grads);
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            let dx = gd.iter().zip(xd).map(|(&g, &v)| g * gelu_parts(v).1).collect();
            acc(*x, like(*x, dx), grads);
        }
        Op::Sigmoid(x) => {
            let dx = gd.iter().zip(out.data()).map(|(&g, &y)| g * y * (S::one() - y)).collect();
            acc(*x, like(*x, dx), grads);
        }
        Op::Softmax(x) => {
            let d = *out.shape().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(gd.len());
            for (gr, yr) in gd.chunks(d.max(1)).zip(out.data().chunks(d.max(1))) {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            acc(*x, like(*x, dx), grads);
        }
        Op::Abs(x) => {
            let xd = val(*x).data();
            let dx = gd
                .iter()
                .zip(xd)
                .map(|(&g, &v)| {
                    if v > S::zero() {
                        g
                    } else if v < S::zero() {
                        -g
                    } else {
                        S::zero()
                    }
                })
                .collect();
            acc(*x, like(*x, dx), grads);
        }
        Op::SumAll(x) => acc(*x, Tensor::full(tape.shape(*x), gd[0]), grads),
        Op::MeanAll(x) => {
            let n = S::lit(val(*x).len().max(1) as f64);
            acc(*x, Tensor::full(tape.shape(*x), gd[0] / n), grads);
        }
        Op::MeanAxis { x, axis } => {
            let (outer, size, inner) = split_at_axis(tape.shape(*x), *axis);
            let inv = S::one() / S::lit(size.max(1) as f64);
            let mut data = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let row = &gd[o * inner..(o + 1) * inner];
                for _ in 0..size {
                    data.extend(row.iter().map(|&v| v * inv));
                }
            }
            acc(*x, like(*x, data), grads);
        }
        Op::AvgPool2(x) => {
            let shape = tape.shape(*x);
            let r = shape.len();
            let (h, w) = (shape[r - 2], shape[r - 1]);
            let (ho, wo) = (out.shape()[r - 2], out.shape()[r - 1]);
            let planes = val(*x).len() / (h * w).max(1);
            let quarter = S::lit(0.25);
            let mut dx = vec![S::zero(); val(*x).len()];
            for p in 0..planes {
                let m = &mut dx[p * h * w..(p + 1) * h * w];
                let gp = &gd[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    let (r0, r1) = (2 * i, (2 * i + 1).min(h - 1));
                    for j in 0..wo {
                        let (c0, c1) = (2 * j, (2 * j + 1).min(w - 1));
                        let v = gp[i * wo + j] * quarter;
                        m[r0 * w + c0] += v;
                        m[r0 * w + c1] += v;
                        m[r1 * w + c0] += v;
                        m[r1 * w + c1] += v;
                    }
                }
            }
            acc(*x, like(*x, dx), grads);
        }
        Op::Bilinear { map, coords } => {
            let ms = tape.shape(*map);
            let (gn, c, h, w) = (ms[0], ms[1], ms[2], ms[3]);
            let n = tape.shape(*coords)[1];
            let md = val(*map).data();
            let cd = val(*coords).data();
            let need_map = tape.requires_grad(*map);
            let need_coords = tape.requires_grad(*coords);
            let mut dmap = if need_map { vec![S::zero(); md.len()] } else { vec![] };
            let mut dcoords = vec![S::zero(); if need_coords { cd.len() } else { 0 }];
            let one = S::one();
            for gi in 0..gn {
                let mbase = gi * c * h * w;
                for ni in 0..n {
                    let base = (gi * n + ni) * 2;
                    let fp = footprint(cd[base], cd[base + 1], h, w);
                    let corners = [
                        (fp.y0 * w + fp.x0, (one - fp.wx) * (one - fp.wy)),
                        (fp.y0 * w + fp.x1, fp.wx * (one - fp.wy)),
                        (fp.y1 * w + fp.x0, (one - fp.wx) * fp.wy),
                        (fp.y1 * w + fp.x1, fp.wx * fp.wy),
                    ];
                    for ci in 0..c {
                        let gv = gd[(gi * n + ni) * c + ci];
                        let off = mbase + ci * h * w;
                        if need_map {
                            for &(cell, wt) in &corners {
                                dmap[off + cell] += gv * wt;
                            }
                        }
                        if need_coords {
                            let m = &md[off..off + h * w];
                            let (a, b) = (m[fp.y0 * w + fp.x0], m[fp.y0 * w + fp.x1]);
                            let (cc, d) = (m[fp.y1 * w + fp.x0], m[fp.y1 * w + fp.x1]);
                            if fp.x_inside {
                                dcoords[base] += gv * ((one - fp.wy) * (b - a) + fp.wy * (d - cc));
                            }
                            if fp.y_inside {
                                dcoords[base + 1] += gv * ((one - fp.wx) * (cc - a) + fp.wx * (d - b));
                            }
                        }
                    }
                }
            }
            if need_map {
                acc(*map, like(*map, dmap), grads);
            }
            if need_coords {
                acc(*coords, like(*coords, dcoords), grads);
            }
        }
        Op::Bce { v, target, eps } => {
            let vd = val(*v).data();
            let n = S::lit(vd.len().max(1) as f64);
            let upper = S::one() - *eps;
            let dv = vd
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    if p <= *eps || p >= upper {
                        S::zero()
                    } else {
                        -gd[0] * (y / p - (S::one() - y) / (S::one() - p)) / n
                    }
                })
                .collect();
            acc(*v, like(*v, dv), grads);
        }
        Op::SoftmaxCe { logits, targets, probs } => {
            let q = tape.shape(*logits)[1];
            let count = targets.iter().flatten().count();
            let mut dl = vec![S::zero(); probs.len()];
            if count > 0 {
                let scale = gd[0] / S::lit(count as f64);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..q {
                        dl[r * q + j] = probs[r * q + j] * scale;
                    }
                    dl[r * q + t] -= scale;
                }
            }
            acc(*logits, like(*logits, dl), grads);
        }
    }
}
