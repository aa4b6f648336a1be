//! Seeded parameter initialization and the binary weight file.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! magic        b"YLTW"
//! version      u32        (currently 1)
//! fingerprint  u64        FNV-1a over the graph's conv table
//! layer_count  u32
//! per conv, in topological order:
//!   id_len     u16
//!   id         id_len bytes, UTF-8
//!   lengths    6 x u32    weights, bias, gamma, beta, running_mean, running_var
//!   arrays     f32 values in the same order; absent arrays have length 0
//! ```

use std::fs;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

use crate::network::NetworkGraph;
use crate::tensor::{BatchNorm, ConvParams, Tensor};

pub const MAGIC: &[u8; 4] = b"YLTW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a weight file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated in {0}")]
    Truncated(String),
    #[error("fingerprint mismatch: file {file:#018x}, graph {graph:#018x}")]
    FingerprintMismatch { file: u64, graph: u64 },
    #[error("layer '{layer}': {what} length {actual}, expected {expected}")]
    LengthMismatch {
        layer: String,
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("layer table mismatch: {0}")]
    LayerTable(String),
    #[error("layer '{layer}': {msg}")]
    InvalidValues { layer: String, msg: String },
    #[error("{0} trailing bytes after last layer")]
    TrailingBytes(usize),
}

impl WeightsError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            WeightsError::Io(_) => 1,
            WeightsError::BadMagic => 2,
            WeightsError::Version(_) => 3,
            WeightsError::Truncated(_) => 4,
            WeightsError::FingerprintMismatch { .. } => 5,
            WeightsError::LengthMismatch { .. } => 6,
            WeightsError::LayerTable(_) => 7,
            WeightsError::InvalidValues { .. } => 8,
            WeightsError::TrailingBytes(_) => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, WeightsError>;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn write_u32(&mut self, v: u32) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.write(&v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Hash of the conv table: ids, geometry and which optional arrays exist.
pub fn fingerprint(g: &NetworkGraph) -> u64 {
    let mut h = Fnv1a::default();
    for (id, p) in g.convs() {
        h.write(id.as_bytes());
        h.write(&[0]);
        for v in [p.in_channels, p.out_channels, p.kernel, p.stride, p.pad] {
            h.write_u32(v as u32);
        }
        h.write(&[p.bias.is_some() as u8, p.bn.is_some() as u8]);
    }
    h.finish()
}

/// Hash over every parameter value (including running statistics).
pub fn param_hash(g: &NetworkGraph) -> u64 {
    let mut h = Fnv1a::default();
    for (_, p) in g.convs() {
        for arr in arrays(p) {
            h.write_u32(arr.len() as u32);
            h.write_f32s(arr);
        }
    }
    h.finish()
}

/// Hash over tensor bits, used to compare head outputs.
pub fn tensor_checksum(tensors: &[&Tensor]) -> u64 {
    let mut h = Fnv1a::default();
    for t in tensors {
        for d in t.shape().as_array() {
            h.write_u32(d as u32);
        }
        h.write_f32s(t.data());
    }
    h.finish()
}

const EMPTY: &[f32] = &[];

fn arrays(p: &ConvParams) -> [&[f32]; 6] {
    let bias = p.bias.as_deref().unwrap_or(EMPTY);
    match &p.bn {
        Some(bn) => [
            &p.weights,
            bias,
            &bn.gamma,
            &bn.beta,
            &bn.running_mean,
            &bn.running_var,
        ],
        None => [&p.weights, bias, EMPTY, EMPTY, EMPTY, EMPTY],
    }
}

/// Deterministic fixture weights.
///
/// A xoshiro256** generator seeded through splitmix64 draws, per conv in
/// topological order, `w = (2u - 1) * sqrt(2 / (k^2 * C_in))` with `u` the
/// top 24 bits of each output as a fraction in `[0, 1)`. Biases are zero and
/// batch norm is reset to identity statistics.
pub fn init_seeded(g: &mut NetworkGraph, seed: u64) {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    for (_, p) in g.convs_mut() {
        let fan_in = (p.kernel * p.kernel * p.in_channels) as f32;
        let scale = (2.0 / fan_in).sqrt();
        for w in p.weights.iter_mut() {
            let u = (rng.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
            *w = (2.0 * u - 1.0) * scale;
        }
        if let Some(b) = &mut p.bias {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        if p.bn.is_some() {
            p.bn = Some(BatchNorm::identity(p.out_channels));
        }
    }
}

/// Sets every weight and bias to zero and batch norm to gamma 0, beta 0.
pub fn zero_all(g: &mut NetworkGraph) {
    for (_, p) in g.convs_mut() {
        p.weights.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = &mut p.bias {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(bn) = &mut p.bn {
            bn.gamma.iter_mut().for_each(|v| *v = 0.0);
            bn.beta.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

pub fn to_bytes(g: &NetworkGraph) -> Vec<u8> {
    let convs = g.convs();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&fingerprint(g).to_le_bytes());
    out.extend_from_slice(&(convs.len() as u32).to_le_bytes());
    for (id, p) in &convs {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        let arrs = arrays(p);
        for a in &arrs {
            out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        }
        for a in &arrs {
            for v in *a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WeightsError::Truncated(ctx()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, ctx: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().unwrap()))
    }

    fn u32(&mut self, ctx: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn u64(&mut self, ctx: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
}

const ARRAY_NAMES: [&str; 6] = ["weights", "bias", "gamma", "beta", "running_mean", "running_var"];

/// Parses `bytes` against `g` and, only if everything validates, replaces
/// the graph's parameters.
pub fn load_bytes(g: &mut NetworkGraph, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = || "header".to_string();
    if r.take(4, &header)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = r.u32(&header)?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version(version));
    }
    let file_fp = r.u64(&header)?;
    let graph_fp = fingerprint(g);
    if file_fp != graph_fp {
        return Err(WeightsError::FingerprintMismatch {
            file: file_fp,
            graph: graph_fp,
        });
    }
    let count = r.u32(&header)? as usize;
    let expected: Vec<(String, [usize; 6])> = g
        .convs()
        .into_iter()
        .map(|(id, p)| (id, arrays(p).map(<[f32]>::len)))
        .collect();
    if count != expected.len() {
        return Err(WeightsError::LayerTable(format!(
            "file has {count} layers, graph has {}",
            expected.len()
        )));
    }

    let mut parsed: Vec<[Vec<f32>; 6]> = Vec::with_capacity(count);
    for (idx, (want_id, want_lens)) in expected.iter().enumerate() {
        let at_index = || format!("layer #{idx}");
        let id_len = r.u16(&at_index)? as usize;
        let id = r.take(id_len, &at_index)?;
        let id = std::str::from_utf8(id)
            .map_err(|_| WeightsError::LayerTable(format!("layer #{idx}: id is not UTF-8")))?
            .to_string();
        if &id != want_id {
            return Err(WeightsError::LayerTable(format!(
                "layer #{idx}: expected '{want_id}', found '{id}'"
            )));
        }
        let in_layer = || format!("layer '{id}'");
        let mut lens = [0usize; 6];
        for (k, l) in lens.iter_mut().enumerate() {
            *l = r.u32(&in_layer)? as usize;
            if *l != want_lens[k] {
                return Err(WeightsError::LengthMismatch {
                    layer: id.clone(),
                    what: ARRAY_NAMES[k],
                    expected: want_lens[k],
                    actual: *l,
                });
            }
        }
        let mut arrs: [Vec<f32>; 6] = Default::default();
        for (k, arr) in arrs.iter_mut().enumerate() {
            let raw = r.take(lens[k] * 4, &in_layer)?;
            *arr = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        parsed.push(arrs);
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
    }

    // build and validate everything before touching the graph
    let mut replacements = Vec::with_capacity(count);
    for ((id, p), arrs) in g.convs().into_iter().zip(parsed) {
        let [weights, bias, gamma, beta, running_mean, running_var] = arrs;
        let q = ConvParams::new(
            p.in_channels,
            p.out_channels,
            p.kernel,
            p.stride,
            p.pad,
            weights,
            p.bias.as_ref().map(|_| bias),
            p.bn.as_ref().map(|bn| BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps: bn.eps,
            }),
        )
        .map_err(|e| WeightsError::InvalidValues {
            layer: id.clone(),
            msg: e.to_string(),
        })?;
        replacements.push(q);
    }
    for ((_, p), q) in g.convs_mut().into_iter().zip(replacements) {
        *p = q;
    }
    Ok(())
}

pub fn save(g: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(g))?;
    Ok(())
}

pub fn load(g: &mut NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    load_bytes(g, &bytes)
}
