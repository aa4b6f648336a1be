//! Static cost model.
//!
//! A convolution costs `M^2 * K^2 * C_in * C_out` (one count per
//! multiply-accumulate, `M` the output side length). A pooling layer costs
//! `C * M^2 * K^2`. Everything else (activations, batch norm, add, concat,
//! global reductions and the attention MLP) costs nothing. All arithmetic is
//! exact `u64`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{GraphError, LayerKind, NetworkGraph, NodeShape, INPUT_ID};
use crate::tensor::{ConvParams, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("{what} must be at least 1")]
    Zero { what: &'static str },
    #[error("receptive field needs at least one layer")]
    EmptyStack,
    #[error("cost overflow")]
    Overflow,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

fn nonzero(v: u64, what: &'static str) -> Result<u64> {
    if v == 0 {
        Err(AnalysisError::Zero { what })
    } else {
        Ok(v)
    }
}

fn product(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(AnalysisError::Overflow)
}

/// `M^2 * K^2 * C_in * C_out`
pub fn flops_of_layer(m: u64, k: u64, c_in: u64, c_out: u64) -> Result<u64> {
    let m = nonzero(m, "M")?;
    let k = nonzero(k, "K")?;
    let c_in = nonzero(c_in, "C_in")?;
    let c_out = nonzero(c_out, "C_out")?;
    product(&[m, m, k, k, c_in, c_out])
}

/// `C * M^2 * K^2`
pub fn flops_of_pool(m: u64, k: u64, c: u64) -> Result<u64> {
    let m = nonzero(m, "M")?;
    let k = nonzero(k, "K")?;
    let c = nonzero(c, "C")?;
    product(&[c, m, m, k, k])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerDesc {
    Conv { m: u64, k: u64, c_in: u64, c_out: u64 },
    Pool { m: u64, k: u64, c: u64 },
}

impl LayerDesc {
    pub fn flops(&self) -> Result<u64> {
        match *self {
            LayerDesc::Conv { m, k, c_in, c_out } => flops_of_layer(m, k, c_in, c_out),
            LayerDesc::Pool { m, k, c } => flops_of_pool(m, k, c),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerDesc::Conv { .. } => "conv",
            LayerDesc::Pool { .. } => "pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub id: String,
    pub kind: String,
    pub m: u64,
    pub k: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
    pub total: u64,
    pub by_kind: BTreeMap<String, u64>,
}

impl FlopsReport {
    fn push(&mut self, id: String, desc: LayerDesc) -> Result<()> {
        let flops = desc.flops()?;
        let (m, k, c_in, c_out) = match desc {
            LayerDesc::Conv { m, k, c_in, c_out } => (m, k, c_in, c_out),
            LayerDesc::Pool { m, k, c } => (m, k, c, c),
        };
        self.total = self.total.checked_add(flops).ok_or(AnalysisError::Overflow)?;
        *self.by_kind.entry(desc.kind().to_string()).or_default() += flops;
        self.entries.push(FlopsEntry {
            id,
            kind: desc.kind().to_string(),
            m,
            k,
            c_in,
            c_out,
            flops,
        });
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<28} {:<5} {:>5} {:>3} {:>6} {:>6} {:>16}\n",
            "layer", "kind", "M", "K", "C_in", "C_out", "FLOPs"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<28} {:<5} {:>5} {:>3} {:>6} {:>6} {:>16}\n",
                e.id, e.kind, e.m, e.k, e.c_in, e.c_out, e.flops
            ));
        }
        for (kind, v) in &self.by_kind {
            s.push_str(&format!("subtotal {kind:<19} {v:>50}\n"));
        }
        s.push_str(&format!("total {:>76}\n", self.total));
        s
    }
}

/// Costs a literal layer list; entries are labelled by position.
pub fn flops_of_list(layers: &[LayerDesc]) -> Result<FlopsReport> {
    let mut report = FlopsReport::default();
    for (i, d) in layers.iter().enumerate() {
        report.push(format!("layer{i}"), *d)?;
    }
    Ok(report)
}

/// Reference CSPBlock cost at 104x104 with 64 channels:
/// 3x3 64->64, 3x3 64->32, 3x3 32->32, 1x1 64->64, all at 104x104.
pub fn reference_csp_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { m: 104, k: 3, c_in: 64, c_out: 64 },
        LayerDesc::Conv { m: 104, k: 3, c_in: 64, c_out: 32 },
        LayerDesc::Conv { m: 104, k: 3, c_in: 32, c_out: 32 },
        LayerDesc::Conv { m: 104, k: 1, c_in: 64, c_out: 64 },
    ]
}

/// Reference ResBlock-D cost at the same input: 1x1 64->32 at 104x104, 3x3
/// stride-2 32->32, 1x1 32->64, the 2x2 average pool and the shortcut 1x1
/// 64->64, all at 52x52.
pub fn reference_resblock_d_layers() -> Vec<LayerDesc> {
    vec![
        LayerDesc::Conv { m: 104, k: 1, c_in: 64, c_out: 32 },
        LayerDesc::Conv { m: 52, k: 3, c_in: 32, c_out: 32 },
        LayerDesc::Conv { m: 52, k: 1, c_in: 32, c_out: 64 },
        LayerDesc::Pool { m: 52, k: 2, c: 64 },
        LayerDesc::Conv { m: 52, k: 1, c_in: 64, c_out: 64 },
    ]
}

fn conv_desc(p: &ConvParams, out: Shape) -> LayerDesc {
    LayerDesc::Conv {
        m: out.h as u64,
        k: p.kernel as u64,
        c_in: p.in_channels as u64,
        c_out: p.out_channels as u64,
    }
}

fn conv_out(p: &ConvParams, s: Shape) -> Shape {
    let (h, w) = p.output_hw(s.h, s.w).expect("shape inference succeeded");
    Shape::new(s.n, p.out_channels, h, w)
}

fn halve(s: Shape) -> Shape {
    Shape::new(s.n, s.c, s.h / 2, s.w / 2)
}

/// Per-convolution and per-pool costs over a graph at a square input size.
pub fn flops_of_graph(g: &NetworkGraph, input_size: usize) -> Result<FlopsReport> {
    let input = Shape::new(1, 3, input_size, input_size);
    let shapes = g.infer_shapes(input)?;
    fn lookup(g: &NetworkGraph, shapes: &[NodeShape], input: Shape, id: &str) -> Shape {
        if id == INPUT_ID {
            return input;
        }
        if let Some(owner) = id.strip_suffix(".route") {
            if let Some(LayerKind::Csp(b)) = g.node(owner).map(|n| &n.kind) {
                let src = lookup(g, shapes, input, &g.node(owner).expect("exists").inputs[0]);
                return b.route_shape(src);
            }
        }
        shapes.iter().find(|s| s.id == id).expect("inferred").shape
    }
    let lookup = |id: &str| lookup(g, &shapes, input, id);
    let mut r = FlopsReport::default();
    for node in g.nodes() {
        let src = node.inputs.first().map(|i| lookup(i));
        let id = |local: &str| format!("{}.{local}", node.id);
        match &node.kind {
            LayerKind::Conv { params, .. } | LayerKind::Head(params) => {
                let out = conv_out(params, src.expect("unary"));
                r.push(node.id.clone(), conv_desc(params, out))?;
            }
            LayerKind::Pool { k, .. } => {
                let out = lookup(&node.id);
                r.push(
                    node.id.clone(),
                    LayerDesc::Pool { m: out.h as u64, k: *k as u64, c: out.c as u64 },
                )?;
            }
            LayerKind::Csp(b) => {
                let s = src.expect("unary");
                let full = conv_out(&b.conv0, s);
                for (name, p) in [("conv0", &b.conv0), ("conv1", &b.conv1), ("conv2", &b.conv2), ("conv3", &b.conv3)] {
                    r.push(id(name), conv_desc(p, full))?;
                }
                let pooled = halve(Shape::new(s.n, 2 * b.channels, s.h, s.w));
                r.push(
                    id("maxpool"),
                    LayerDesc::Pool { m: pooled.h as u64, k: 2, c: pooled.c as u64 },
                )?;
            }
            LayerKind::ResBlockD(b) => {
                let s = src.expect("unary");
                let a1 = conv_out(&b.a_reduce, s);
                r.push(id("a_reduce"), conv_desc(&b.a_reduce, a1))?;
                let a2 = conv_out(&b.a_down, a1);
                r.push(id("a_down"), conv_desc(&b.a_down, a2))?;
                r.push(id("a_expand"), conv_desc(&b.a_expand, conv_out(&b.a_expand, a2)))?;
                let pooled = halve(s);
                r.push(
                    id("b_pool"),
                    LayerDesc::Pool { m: pooled.h as u64, k: 2, c: pooled.c as u64 },
                )?;
                r.push(id("b_proj"), conv_desc(&b.b_proj, conv_out(&b.b_proj, pooled)))?;
            }
            LayerKind::Aux(b) => {
                let s = src.expect("unary");
                let a = conv_out(&b.conv1, s);
                r.push(id("conv1"), conv_desc(&b.conv1, a))?;
                let c2 = conv_out(&b.conv2, a);
                r.push(id("conv2"), conv_desc(&b.conv2, c2))?;
                let sp = conv_out(&b.cbam.spatial, Shape::new(c2.n, 2, c2.h, c2.w));
                r.push(id("cbam.spatial"), conv_desc(&b.cbam.spatial, sp))?;
            }
            LayerKind::Cbam(b) => {
                let s = src.expect("unary");
                let sp = conv_out(&b.spatial, Shape::new(s.n, 2, s.h, s.w));
                r.push(id("spatial"), conv_desc(&b.spatial, sp))?;
            }
            LayerKind::Upsample | LayerKind::Concat | LayerKind::Add => {}
        }
    }
    Ok(r)
}

/// Receptive field size and cumulative stride (jump).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: u64,
    pub jump: u64,
}

/// `r <- r + (k - 1) * j; j <- j * stride`, from `r = j = 1`.
pub fn receptive_field(layers: &[(u64, u64)]) -> Result<ReceptiveField> {
    if layers.is_empty() {
        return Err(AnalysisError::EmptyStack);
    }
    let mut rf = ReceptiveField { size: 1, jump: 1 };
    for &(k, stride) in layers {
        let k = nonzero(k, "K")?;
        let stride = nonzero(stride, "stride")?;
        rf.size += (k - 1) * rf.jump;
        rf.jump *= stride;
    }
    Ok(rf)
}
