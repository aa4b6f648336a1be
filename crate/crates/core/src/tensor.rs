//! Dense NCHW tensors and the numeric primitives the network is built from.
//!
//! Every primitive is a pure function. Results are validated to be finite;
//! a NaN or infinity is reported as [`TensorError::NonFinite`] instead of
//! being stored. Convolution, pooling and reductions use a fixed accumulation
//! order per output element, so serial and parallel execution produce
//! bit-identical results.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Batch-norm epsilon used by every normalized convolution.
pub const BN_EPS: f32 = 1e-5;

/// Default LeakyReLU divisor (negative slope 0.1).
pub const LEAKY_DIVISOR: f32 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape {shape} (expected {expected})")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    Incompatible {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: window {k} larger than padded input {size}")]
    WindowTooLarge {
        op: &'static str,
        k: usize,
        size: usize,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Tensor dimensions in (batch, channels, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Execution strategy for the heavy primitives. Both modes are bit-identical.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Serial,
    #[default]
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self { shape, data })
    }

    fn checked(op: &'static str, shape: Shape, data: Vec<f32>) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.numel());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Fills the tensor from a function of the flat (n, c, h, w) index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// The (h, w) plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    /// Copies channels `[start, end)` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.shape.c {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                msg: format!("range {start}..{end} out of bounds for {} channels", self.shape.c),
            });
        }
        let plane = self.shape.plane();
        let shape = Shape::new(self.shape.n, end - start, self.shape.h, self.shape.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            let base = (n * self.shape.c) * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor { shape, data })
    }

    /// Elementwise map; the result is validated to be finite.
    pub fn map(&self, op: &'static str, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Self::checked(op, self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Inference-mode batch normalization for one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    /// Identity statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    /// `gamma * (v - mean) / sqrt(var + eps) + beta`
    #[inline]
    pub fn apply(&self, ch: usize, v: f32) -> f32 {
        (v - self.running_mean[ch]) / (self.running_var[ch] + self.eps).sqrt() * self.gamma[ch]
            + self.beta[ch]
    }
}

/// Convolution hyper-parameters and learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out * in * k * k`, laid out (out, in, ky, kx).
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub bn: Option<BatchNorm>,
}

impl ConvParams {
    /// Validated constructor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
        bn: Option<BatchNorm>,
    ) -> Result<Self> {
        let p = Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weights,
            bias,
            bn,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero weights and bias, identity batch norm. The "same" padding rule
    /// (`k / 2`) is applied.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        with_bn: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: with_bias.then(|| vec![0.0; out_channels]),
            bn: with_bn.then(|| BatchNorm::identity(out_channels)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "conv_params";
        if self.kernel == 0 || self.stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "kernel and stride must be positive".into(),
            });
        }
        let expected = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weights.len() != expected {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "weights",
                expected,
                actual: self.weights.len(),
            });
        }
        let mut finite = self.weights.iter().all(|v| v.is_finite());
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(TensorError::DimMismatch {
                    op: OP,
                    dim: "bias",
                    expected: self.out_channels,
                    actual: b.len(),
                });
            }
            finite &= b.iter().all(|v| v.is_finite());
        }
        if let Some(bn) = &self.bn {
            for (name, arr) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                if arr.len() != self.out_channels {
                    return Err(TensorError::DimMismatch {
                        op: OP,
                        dim: name,
                        expected: self.out_channels,
                        actual: arr.len(),
                    });
                }
                finite &= arr.iter().all(|v| v.is_finite());
            }
            if bn.running_var.iter().any(|&v| v < 0.0) {
                return Err(TensorError::InvalidArgument {
                    op: OP,
                    msg: "running_var must be non-negative".into(),
                });
            }
            if !(bn.eps > 0.0) {
                return Err(TensorError::InvalidArgument {
                    op: OP,
                    msg: "batch-norm eps must be positive".into(),
                });
            }
        }
        if !finite {
            return Err(TensorError::NonFinite { op: OP });
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel || pw < self.kernel {
            return Err(TensorError::WindowTooLarge {
                op: "conv2d",
                k: self.kernel,
                size: ph.min(pw),
            });
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    /// Learned parameter count: weights, bias, BN gamma and beta. Running
    /// statistics are buffers and are not counted.
    pub fn learnable_count(&self) -> usize {
        self.weights.len()
            + self.bias.as_ref().map_or(0, Vec::len)
            + self.bn.as_ref().map_or(0, |bn| bn.gamma.len() + bn.beta.len())
    }
}

/// Direct 2-D convolution with zero padding, optional bias and batch norm.
///
/// Each output element starts at `0.0` and accumulates `w * x` over input
/// channels, then kernel rows, then kernel columns, skipping padded taps.
/// The bias is added afterwards, then the batch-norm affine.
pub fn conv2d(input: &Tensor, params: &ConvParams, exec: Exec) -> Result<Tensor> {
    let s = input.shape();
    if s.c != params.in_channels {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "in_channels",
            expected: params.in_channels,
            actual: s.c,
        });
    }
    let (oh, ow) = params.output_hw(s.h, s.w)?;
    let out_shape = Shape::new(s.n, params.out_channels, oh, ow);
    let mut out = vec![0.0f32; out_shape.numel()];
    let plane = oh * ow;
    if plane == 0 {
        return Ok(Tensor { shape: out_shape, data: out });
    }

    let job = |(idx, dst): (usize, &mut [f32])| {
        let n = idx / params.out_channels;
        let co = idx % params.out_channels;
        conv_plane(input, params, n, co, oh, ow, dst);
    };
    match exec {
        Exec::Serial => out.chunks_mut(plane).enumerate().for_each(job),
        Exec::Parallel => out.par_chunks_mut(plane).enumerate().for_each(job),
    }
    Tensor::checked("conv2d", out_shape, out)
}

fn conv_plane(
    input: &Tensor,
    p: &ConvParams,
    n: usize,
    co: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
) {
    let s = input.shape();
    let (k, stride, pad) = (p.kernel, p.stride, p.pad);
    for ci in 0..p.in_channels {
        let src = input.plane(n, ci);
        let wbase = (co * p.in_channels + ci) * k * k;
        for ky in 0..k {
            for kx in 0..k {
                let wv = p.weights[wbase + ky * k + kx];
                // valid ox: 0 <= ox*stride + kx - pad < w
                let ox_lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
                let ox_hi = if s.w + pad > kx {
                    ((s.w + pad - kx - 1) / stride + 1).min(ow)
                } else {
                    0
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= s.h {
                        continue;
                    }
                    let row = &src[(iy - pad) * s.w..(iy - pad + 1) * s.w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let off = ox_lo + kx - pad;
                        let len = ox_hi - ox_lo;
                        for (o, &x) in out_row[ox_lo..ox_hi].iter_mut().zip(&row[off..off + len]) {
                            *o += wv * x;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += wv * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = &p.bias {
        let bv = b[co];
        dst.iter_mut().for_each(|v| *v += bv);
    }
    if let Some(bn) = &p.bn {
        dst.iter_mut().for_each(|v| *v = bn.apply(co, *v));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Unpadded window pooling. Max starts from the first window element and
/// scans row-major; avg sums row-major and divides by `k * k`.
pub fn pool2d(input: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "pool2d",
            msg: "k and stride must be positive".into(),
        });
    }
    let s = input.shape();
    if s.h < k || s.w < k {
        return Err(TensorError::WindowTooLarge {
            op: "pool2d",
            k,
            size: s.h.min(s.w),
        });
    }
    let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
    let shape = Shape::new(s.n, s.c, oh, ow);
    let area = (k * k) as f32;
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let v = match kind {
                        PoolKind::Max => {
                            let mut m = src[y0 * s.w + x0];
                            for y in y0..y0 + k {
                                for x in x0..x0 + k {
                                    m = m.max(src[y * s.w + x]);
                                }
                            }
                            m
                        }
                        PoolKind::Avg => {
                            let mut acc = 0.0f32;
                            for y in y0..y0 + k {
                                for x in x0..x0 + k {
                                    acc += src[y * s.w + x];
                                }
                            }
                            acc / area
                        }
                    };
                    data.push(v);
                }
            }
        }
    }
    Tensor::checked("pool2d", shape, data)
}

/// `x` for non-negative inputs, `x / a` otherwise. Requires `a > 1`.
pub fn leaky_relu(input: &Tensor, a: f32) -> Result<Tensor> {
    if !(a > 1.0) || !a.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "leaky_relu",
            msg: format!("divisor must be finite and > 1, got {a}"),
        });
    }
    input.map("leaky_relu", |x| if x >= 0.0 { x } else { x / a })
}

pub fn relu(input: &Tensor) -> Result<Tensor> {
    input.map("relu", |x| x.max(0.0))
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Result<Tensor> {
    input.map("sigmoid", sigmoid_scalar)
}

/// Concatenates along channels, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(TensorError::Incompatible {
            op: "concat_channels",
            lhs: sa,
            rhs: sb,
        });
    }
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data[n * lb..(n + 1) * lb]);
    }
    Ok(Tensor { shape, data })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::checked("add", a.shape(), data)
}

/// Elementwise product where `m` is `(n, c, 1, 1)`, `(n, 1, h, w)` or the
/// full shape of `a`.
pub fn broadcast_mul(a: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (sa, sm) = (a.shape(), m.shape());
    let plane = sa.plane();
    let data: Vec<f32> = if sm == sa {
        a.data.iter().zip(&m.data).map(|(x, y)| x * y).collect()
    } else if sm == Shape::new(sa.n, sa.c, 1, 1) {
        a.data
            .chunks(plane.max(1))
            .zip(&m.data)
            .flat_map(|(chunk, &f)| chunk.iter().map(move |x| x * f))
            .collect()
    } else if sm == Shape::new(sa.n, 1, sa.h, sa.w) {
        let mut out = Vec::with_capacity(sa.numel());
        for n in 0..sa.n {
            let mask = &m.data[n * plane..(n + 1) * plane];
            for c in 0..sa.c {
                out.extend(a.plane(n, c).iter().zip(mask).map(|(x, y)| x * y));
            }
        }
        out
    } else {
        return Err(TensorError::Incompatible {
            op: "broadcast_mul",
            lhs: sa,
            rhs: sm,
        });
    };
    Tensor::checked("broadcast_mul", sa, data)
}

/// Global pooling over each channel plane: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn channel_pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let s = input.shape();
    if s.numel() == 0 {
        return Err(TensorError::Empty { op: "channel_pool" });
    }
    let count = s.plane() as f32;
    let data = input
        .data
        .chunks(s.plane())
        .map(|p| match kind {
            PoolKind::Max => p[1..].iter().fold(p[0], |m, &v| m.max(v)),
            PoolKind::Avg => p.iter().fold(0.0f32, |acc, &v| acc + v) / count,
        })
        .collect();
    Tensor::checked("channel_pool", Shape::new(s.n, s.c, 1, 1), data)
}

/// Reduction across channels per pixel: `(n, c, h, w) -> (n, 1, h, w)`.
/// Channels are visited in ascending order.
pub fn spatial_pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let s = input.shape();
    if s.numel() == 0 {
        return Err(TensorError::Empty { op: "spatial_pool" });
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let mut acc: Vec<f32> = input.plane(n, 0).to_vec();
        for c in 1..s.c {
            for (a, &v) in acc.iter_mut().zip(input.plane(n, c)) {
                *a = match kind {
                    PoolKind::Max => a.max(v),
                    PoolKind::Avg => *a + v,
                };
            }
        }
        if kind == PoolKind::Avg {
            acc.iter_mut().for_each(|a| *a /= s.c as f32);
        }
        data.extend(acc);
    }
    Tensor::checked("spatial_pool", Shape::new(s.n, 1, s.h, s.w), data)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let s = input.shape();
    let shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for y in 0..shape.h {
                let row = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                for x in 0..shape.w {
                    data.push(row[x / 2]);
                }
            }
        }
    }
    Tensor { shape, data }
}
