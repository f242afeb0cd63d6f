//! Forward kernels and their vector-Jacobian products.
//!
//! Image tensors are laid out `[batch, channels, spatial...]`. The
//! convolution family is 2D only; everything else is rank-generic.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a 2D convolution, checked once and shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape("conv2d", x, k));
        }
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, kcin, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kcin != cin {
            return Err(Error::shape("conv2d", x, k));
        }
        if b != [cout] {
            return Err(Error::shape("conv2d bias", k, b));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel extents must be odd, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!(
                    "input {x:?} with kernel {k:?}, stride {stride}, padding {pad} does not tile"
                ),
            });
        }
        Ok(Self {
            batch,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source row/column for output coordinate `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.ho {
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    match g.src(oi, ki, g.h) {
                        None => out_row.fill(T::zero()),
                        Some(ii) => {
                            let src_row = &plane[ii * g.w..(ii + 1) * g.w];
                            for (oj, v) in out_row.iter_mut().enumerate() {
                                *v = match g.src(oj, kj, g.w) {
                                    Some(jj) => src_row[jj],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.ho {
                    let Some(ii) = g.src(oi, ki, g.h) else {
                        continue;
                    };
                    for oj in 0..g.wo {
                        if let Some(jj) = g.src(oj, kj, g.w) {
                            plane[ii * g.w + jj] = plane[ii * g.w + jj] + src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` on row-major slices; `a` is `m×k`, `b` is `k×n` after
/// the optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    let av = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm lhs");
    let bv = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm rhs");
    let av = if a_t { av.reversed_axes() } else { av };
    let bv = if b_t { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("gemm out");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

/// Cross-correlation of `x [B,Cin,H,W]` with `k [Cout,Cin,kh,kw]` plus bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), k.shape(), b.shape(), stride, pad)?;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_pixels();
    let mut out = vec![T::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len.max(1))
        .zip(x.data().par_chunks(in_len.max(1)))
        .for_each(|(y, xb)| {
            for (co, plane) in y.chunks_mut(g.out_pixels()).enumerate() {
                plane.fill(b.data()[co]);
            }
            if g.is_pointwise() {
                gemm(k.data(), g.cout, g.cin, false, xb, g.cin, g.out_pixels(), false, T::one(), y);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
                im2col(&g, xb, &mut cols);
                let (p, n) = (g.patch_len(), g.out_pixels());
                gemm(k.data(), g.cout, p, false, &cols, p, n, false, T::one(), y);
            }
        });
    Tensor::new(vec![g.batch, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &ConvGeom,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_pixels();
    let (p, n) = (g.patch_len(), g.out_pixels());
    let per_item: Vec<(Vec<T>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|bi| {
            let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
            let dyb = &dy.data()[bi * out_len..(bi + 1) * out_len];
            let mut dk = vec![T::zero(); g.cout * p];
            let dx = if g.is_pointwise() {
                gemm(dyb, g.cout, n, false, xb, g.cin, n, true, T::zero(), &mut dk);
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); in_len];
                    gemm(k.data(), g.cout, g.cin, true, dyb, g.cout, n, false, T::zero(), &mut dx);
                    dx
                })
            } else {
                let mut cols = vec![T::zero(); p * n];
                im2col(g, xb, &mut cols);
                gemm(dyb, g.cout, n, false, &cols, p, n, true, T::zero(), &mut dk);
                need_dx.then(|| {
                    gemm(k.data(), g.cout, p, true, dyb, g.cout, n, false, T::zero(), &mut cols);
                    let mut dx = vec![T::zero(); in_len];
                    col2im(g, &cols, &mut dx);
                    dx
                })
            };
            (dk, dx)
        })
        .collect();

    let mut dk = vec![T::zero(); g.cout * p];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_len));
    for (dkb, dxb) in per_item {
        for (acc, v) in dk.iter_mut().zip(dkb) {
            *acc = *acc + v;
        }
        if let (Some(dx), Some(dxb)) = (dx.as_mut(), dxb) {
            dx.extend(dxb);
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for bi in 0..g.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let start = bi * out_len + co * n;
            *acc = *acc + dy.data()[start..start + n].iter().copied().sum::<T>();
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        Tensor::new(k.shape().to_vec(), dk).expect("dk shape"),
        Tensor::new(vec![g.cout], db).expect("db shape"),
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |v, d| if v > T::zero() { d } else { T::zero() })
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

fn spatial_dims(op: &'static str, shape: &[usize], min_rank: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < min_rank {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected rank >= {min_rank}, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected [B,C,H,W], got {shape:?}"),
        });
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = image_dims("maxpool2", x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2",
            detail: format!("spatial extents must be even, got {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                out.push(a.max(b).max(c.max(d)));
            }
        }
    }
    let s = x.shape();
    Tensor::new(vec![s[0], s[1], ho, wo], out)
}

/// Routes each output gradient to the first maximal element of its window.
pub fn maxpool2_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![T::zero(); x.len()];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    2 * i * w + 2 * j,
                    2 * i * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if src[c] > src[best] {
                        best = c;
                    }
                }
                dx[p * h * w + best] = dx[p * h * w + best] + dy.data()[p * ho * wo + i * wo + j];
            }
        }
    }
    Tensor::new(s.to_vec(), dx).expect("maxpool dx")
}

/// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = image_dims("upsample2x", x.shape())?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    let s = x.shape();
    Tensor::new(vec![s[0], s[1], ho, wo], out)
}

pub fn upsample2x_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (planes, h, w) = (x_shape[0] * x_shape[1], x_shape[2], x_shape[3]);
    let wo = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let base = 2 * i * wo + 2 * j;
                dx[p * h * w + i * w + j] =
                    src[base] + src[base + 1] + src[base + wo] + src[base + wo + 1];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).expect("upsample dx")
}

/// Concatenate along the channel axis (axis 1).
pub fn channel_concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape("channel_concat", sa, sb));
    }
    let (batch, ca, inner) = spatial_dims("channel_concat", sa, 2)?;
    let cb = sb[1];
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..batch {
        out.extend_from_slice(&a.data()[bi * ca * inner..(bi + 1) * ca * inner]);
        out.extend_from_slice(&b.data()[bi * cb * inner..(bi + 1) * cb * inner]);
    }
    let mut shape = sa.to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, out)
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn channel_concat_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let batch = a_shape[0];
    let inner: usize = a_shape[2..].iter().product();
    let (ca, cb) = (a_shape[1], b_shape[1]);
    let mut da = Vec::with_capacity(batch * ca * inner);
    let mut db = Vec::with_capacity(batch * cb * inner);
    for bi in 0..batch {
        let row = &dy.data()[bi * (ca + cb) * inner..(bi + 1) * (ca + cb) * inner];
        da.extend_from_slice(&row[..ca * inner]);
        db.extend_from_slice(&row[ca * inner..]);
    }
    (
        Tensor::new(a_shape.to_vec(), da).expect("concat da"),
        Tensor::new(b_shape.to_vec(), db).expect("concat db"),
    )
}

/// Softmax over axis 1 with max subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, k, inner) = spatial_dims("softmax_channels", x.shape(), 2)?;
    if k < 2 {
        return Err(Error::InvalidShape {
            op: "softmax_channels",
            detail: format!("need at least 2 channels, got {k}"),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..batch {
        let base = b * k * inner;
        for s in 0..inner {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(src[base + c * inner + s]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[base + c * inner + s] - m).exp();
                out[base + c * inner + s] = e;
                z = z + e;
            }
            for c in 0..k {
                out[base + c * inner + s] = out[base + c * inner + s] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let (batch, k, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let (yv, gv) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..batch {
        let base = b * k * inner;
        for sp in 0..inner {
            let mut dot = T::zero();
            for c in 0..k {
                let i = base + c * inner + sp;
                dot = dot + yv[i] * gv[i];
            }
            for c in 0..k {
                let i = base + c * inner + sp;
                dx[i] = yv[i] * (gv[i] - dot);
            }
        }
    }
    Tensor::new(s.to_vec(), dx).expect("softmax dx")
}

/// Elementwise binary operators with same-rank broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// Result shape of broadcasting `a` against `b`; each axis must match or be 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// For every flat output index, the flat index into an operand of shape `src`.
fn broadcast_indices(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, |x, y| op.apply(x, y)));
    }
    let shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
    let ia = broadcast_indices(&shape, a.shape());
    let ib = broadcast_indices(&shape, b.shape());
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| op.apply(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data)
}

/// Sum `g` (output-shaped) down to `target` shape, undoing broadcasting.
fn unbroadcast<T: Scalar>(g: Vec<T>, out_shape: &[usize], target: &[usize]) -> Tensor<T> {
    if out_shape == target {
        return Tensor::new(target.to_vec(), g).expect("unbroadcast");
    }
    let idx = broadcast_indices(out_shape, target);
    let mut acc = vec![T::zero(); target.iter().product()];
    for (v, i) in g.into_iter().zip(idx) {
        acc[i] = acc[i] + v;
    }
    Tensor::new(target.to_vec(), acc).expect("unbroadcast")
}

/// Gradients of [`binary`] for each operand.
pub fn binary_backward<T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let out = dy.shape();
    let same = a.shape() == b.shape();
    let ia = if same { Vec::new() } else { broadcast_indices(out, a.shape()) };
    let ib = if same { Vec::new() } else { broadcast_indices(out, b.shape()) };
    let at = |n: usize| if same { a.data()[n] } else { a.data()[ia[n]] };
    let bt = |n: usize| if same { b.data()[n] } else { b.data()[ib[n]] };
    let g = dy.data();
    let (ga, gb): (Vec<T>, Vec<T>) = match op {
        BinaryOp::Add => (g.to_vec(), g.to_vec()),
        BinaryOp::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
        BinaryOp::Mul => (0..g.len())
            .map(|n| (g[n] * bt(n), g[n] * at(n)))
            .unzip(),
        BinaryOp::Div => (0..g.len())
            .map(|n| {
                let (x, y) = (at(n), bt(n));
                (g[n] / y, -g[n] * x / (y * y))
            })
            .unzip(),
    };
    (unbroadcast(ga, out, a.shape()), unbroadcast(gb, out, b.shape()))
}

/// `ln(max(x, floor))`.
pub fn log_clamped<T: Scalar>(x: &Tensor<T>, floor: T) -> Tensor<T> {
    x.map(|v| v.max(floor).ln())
}

pub fn log_clamped_backward<T: Scalar>(x: &Tensor<T>, floor: T, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |v, d| if v > floor { d / v } else { T::zero() })
}

/// Sum over axis 1, keeping it with extent 1: `[B,K,...] -> [B,1,...]`.
pub fn sum_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, k, inner) = spatial_dims("sum_channels", x.shape(), 2)?;
    let mut out = vec![T::zero(); batch * inner];
    for b in 0..batch {
        for c in 0..k {
            let src = &x.data()[(b * k + c) * inner..(b * k + c + 1) * inner];
            for (o, &v) in out[b * inner..(b + 1) * inner].iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = 1;
    Tensor::new(shape, out)
}

pub fn sum_channels_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (batch, k) = (x_shape[0], x_shape[1]);
    let inner: usize = x_shape[2..].iter().product();
    let mut dx = Vec::with_capacity(batch * k * inner);
    for b in 0..batch {
        for _ in 0..k {
            dx.extend_from_slice(&dy.data()[b * inner..(b + 1) * inner]);
        }
    }
    Tensor::new(x_shape.to_vec(), dx).expect("sum_channels dx")
}

/// Per-channel totals over batch and space: `[B,K,...] -> [K]`.
pub fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, k, inner) = spatial_dims("channel_sums", x.shape(), 2)?;
    let mut out = vec![T::zero(); k];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let src = &x.data()[(b * k + c) * inner..(b * k + c + 1) * inner];
            *acc = *acc + src.iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![k], out)
}

pub fn channel_sums_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (batch, k) = (x_shape[0], x_shape[1]);
    let inner: usize = x_shape[2..].iter().product();
    let mut dx = Vec::with_capacity(batch * k * inner);
    for _ in 0..batch {
        for c in 0..k {
            dx.extend(std::iter::repeat(dy.data()[c]).take(inner));
        }
    }
    Tensor::new(x_shape.to_vec(), dx).expect("channel_sums dx")
}

pub fn reduce_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

pub fn reduce_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum::<T>() / T::of(x.len() as f64))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v * c)
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v + c)
}
