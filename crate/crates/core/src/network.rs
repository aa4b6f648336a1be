//! Layer graphs for YOLOv4-tiny and the ResBlock-D/CBAM variant.
//!
//! A [`NetworkGraph`] is an ordered list of [`LayerNode`]s. Each node reads
//! values produced by earlier nodes (or the reserved [`INPUT_ID`]) and
//! publishes one value under its own id. CSP nodes also publish their
//! pre-pool route feature as `"<id>.route"`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    cbl, fuse, AuxBlock, BlockError, Cbam, ConvOwner, CspBlock, ResBlockD, CBAM_REDUCTION,
};
use crate::tensor::{
    concat_channels, conv2d, pool2d, upsample_nearest2x, ConvParams, Exec, PoolKind, Shape,
    Tensor, TensorError,
};

/// Value id of the network input.
pub const INPUT_ID: &str = "input";
/// Anchors per detection scale.
pub const ANCHORS_PER_SCALE: usize = 3;
pub const DEFAULT_INPUT_SIZE: usize = 416;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node '{id}': {source}")]
    Node {
        id: String,
        #[source]
        source: BlockError,
    },
    #[error("node '{id}' references unknown or later value '{input}'")]
    UnknownInput { id: String, input: String },
    #[error("duplicate node id '{0}'")]
    DuplicateId(String),
    #[error("node '{id}' expects {expected} inputs, got {actual}")]
    Arity {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("node '{0}' does not contribute to any head")]
    Unreachable(String),
    #[error("unknown output '{0}'")]
    UnknownOutput(String),
    #[error("input shape {0} invalid: expected (n, 3, s, s) with s a positive multiple of 32")]
    BadInput(Shape),
    #[error("classes must be at least 1")]
    NoClasses,
}

impl GraphError {
    fn at(id: &str, e: impl Into<BlockError>) -> Self {
        GraphError::Node {
            id: id.to_string(),
            source: e.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Leaky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "v4tiny")]
    V4Tiny,
    Proposed,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::V4Tiny => "v4tiny",
            Variant::Proposed => "proposed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { params: ConvParams, act: Activation },
    Pool { kind: PoolKind, k: usize, stride: usize },
    Upsample,
    Concat,
    Add,
    Csp(CspBlock),
    ResBlockD(ResBlockD),
    Aux(AuxBlock),
    Cbam(Cbam),
    /// Linear biased convolution producing raw predictions.
    Head(ConvParams),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Upsample => "upsample",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::Csp(_) => "csp",
            LayerKind::ResBlockD(_) => "resblock_d",
            LayerKind::Aux(_) => "aux",
            LayerKind::Cbam(_) => "cbam",
            LayerKind::Head(_) => "head",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Concat | LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Named convolutions owned by this layer, in a fixed order.
    pub fn convs(&self) -> Vec<(&'static str, &ConvParams)> {
        match self {
            LayerKind::Conv { params, .. } | LayerKind::Head(params) => vec![("", params)],
            LayerKind::Csp(b) => b.convs(),
            LayerKind::ResBlockD(b) => b.convs(),
            LayerKind::Aux(b) => b.convs(),
            LayerKind::Cbam(b) => b.convs(),
            _ => Vec::new(),
        }
    }

    pub fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        match self {
            LayerKind::Conv { params, .. } | LayerKind::Head(params) => vec![("", params)],
            LayerKind::Csp(b) => b.convs_mut(),
            LayerKind::ResBlockD(b) => b.convs_mut(),
            LayerKind::Aux(b) => b.convs_mut(),
            LayerKind::Cbam(b) => b.convs_mut(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(id: &str, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Learned parameter count of this node.
    pub fn param_count(&self) -> usize {
        self.kind.convs().iter().map(|(_, p)| p.learnable_count()).sum()
    }
}

/// Fully qualified name of a convolution owned by `node`.
pub fn conv_id(node: &str, local: &str) -> String {
    if local.is_empty() {
        node.to_string()
    } else {
        format!("{node}.{local}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    variant: Variant,
    classes: usize,
    nodes: Vec<LayerNode>,
    outputs: (String, String),
}

/// Per-node inferred output shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeShape {
    pub id: String,
    pub shape: Shape,
}

impl NetworkGraph {
    /// Assembles and validates a graph. `outputs` are the coarse (stride 32)
    /// and fine (stride 16) head ids.
    pub fn from_nodes(
        variant: Variant,
        classes: usize,
        nodes: Vec<LayerNode>,
        outputs: (&str, &str),
    ) -> Result<Self> {
        if classes == 0 {
            return Err(GraphError::NoClasses);
        }
        let g = Self {
            variant,
            classes,
            nodes,
            outputs: (outputs.0.to_string(), outputs.1.to_string()),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let mut known: HashSet<String> = HashSet::from([INPUT_ID.to_string()]);
        for node in &self.nodes {
            if node.inputs.len() != node.kind.arity() {
                return Err(GraphError::Arity {
                    id: node.id.clone(),
                    expected: node.kind.arity(),
                    actual: node.inputs.len(),
                });
            }
            for input in &node.inputs {
                if !known.contains(input) {
                    return Err(GraphError::UnknownInput {
                        id: node.id.clone(),
                        input: input.clone(),
                    });
                }
            }
            if node.id == INPUT_ID || !known.insert(node.id.clone()) {
                return Err(GraphError::DuplicateId(node.id.clone()));
            }
            if let LayerKind::Csp(_) = node.kind {
                known.insert(format!("{}.route", node.id));
            }
        }
        for out in [&self.outputs.0, &self.outputs.1] {
            if !self.nodes.iter().any(|n| &n.id == out) {
                return Err(GraphError::UnknownOutput(out.clone()));
            }
        }
        // every node must feed a head
        let mut live: HashSet<&str> = HashSet::from([self.outputs.0.as_str(), self.outputs.1.as_str()]);
        for node in self.nodes.iter().rev() {
            let route = format!("{}.route", node.id);
            if live.contains(node.id.as_str()) || live.contains(route.as_str()) {
                for input in &node.inputs {
                    let base = input.strip_suffix(".route").unwrap_or(input);
                    live.insert(base);
                }
            } else {
                return Err(GraphError::Unreachable(node.id.clone()));
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn outputs(&self) -> (&str, &str) {
        (&self.outputs.0, &self.outputs.1)
    }

    /// Channels of each head: `anchors * (5 + classes)`.
    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_SCALE * (5 + self.classes)
    }

    /// All convolutions in topological order with fully qualified ids.
    pub fn convs(&self) -> Vec<(String, &ConvParams)> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.kind
                    .convs()
                    .into_iter()
                    .map(move |(local, p)| (conv_id(&n.id, local), p))
            })
            .collect()
    }

    pub fn convs_mut(&mut self) -> Vec<(String, &mut ConvParams)> {
        self.nodes
            .iter_mut()
            .flat_map(|n| {
                let id = n.id.clone();
                n.kind
                    .convs_mut()
                    .into_iter()
                    .map(move |(local, p)| (conv_id(&id, local), p))
            })
            .collect()
    }

    /// Learned parameters: conv weights, biases, BN gamma and beta.
    pub fn count_params(&self) -> usize {
        self.nodes.iter().map(LayerNode::param_count).sum()
    }

    /// Number of convolutions, composite blocks expanded.
    pub fn count_layers(&self) -> usize {
        self.convs().len()
    }

    /// Static shape inference. Returns one entry per node in order.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<NodeShape>> {
        check_input(input)?;
        let mut shapes: HashMap<String, Shape> = HashMap::from([(INPUT_ID.to_string(), input)]);
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|i| shapes[i]).collect();
            let s = node_shape(node, &ins)?;
            if let LayerKind::Csp(b) = &node.kind {
                shapes.insert(format!("{}.route", node.id), b.route_shape(ins[0]));
            }
            shapes.insert(node.id.clone(), s);
            out.push(NodeShape {
                id: node.id.clone(),
                shape: s,
            });
        }
        Ok(out)
    }

    /// Runs the network and returns `(coarse_head, fine_head)`.
    pub fn forward(&self, input: &Tensor, exec: Exec) -> Result<(Tensor, Tensor)> {
        let mut values = self.run(input, exec, None)?;
        let coarse = values.remove(&self.outputs.0).expect("validated output");
        let fine = values.remove(&self.outputs.1).expect("validated output");
        Ok((coarse, fine))
    }

    /// Like [`forward`](Self::forward) but records the actual output shape of every node.
    pub fn forward_traced(&self, input: &Tensor, exec: Exec) -> Result<Vec<NodeShape>> {
        let mut trace = Vec::new();
        self.run(input, exec, Some(&mut trace))?;
        Ok(trace)
    }

    fn run(
        &self,
        input: &Tensor,
        exec: Exec,
        mut trace: Option<&mut Vec<NodeShape>>,
    ) -> Result<HashMap<String, Tensor>> {
        check_input(input.shape())?;
        // remaining consumer counts so intermediates can be dropped early
        let mut uses: HashMap<&str, usize> = HashMap::new();
        for node in &self.nodes {
            for i in &node.inputs {
                *uses.entry(i.as_str()).or_default() += 1;
            }
        }
        let mut values: HashMap<String, Tensor> = HashMap::new();
        values.insert(INPUT_ID.to_string(), input.clone());
        for node in &self.nodes {
            let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
            let (out, route) = eval_node(node, &ins, exec)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(NodeShape {
                    id: node.id.clone(),
                    shape: out.shape(),
                });
            }
            for i in &node.inputs {
                let left = uses.get_mut(i.as_str()).expect("counted");
                *left -= 1;
                if *left == 0 {
                    values.remove(i);
                }
            }
            if let Some(r) = route {
                values.insert(format!("{}.route", node.id), r);
            }
            values.insert(node.id.clone(), out);
        }
        Ok(values)
    }
}

fn check_input(s: Shape) -> Result<()> {
    if s.n == 0 || s.c != 3 || s.h != s.w || s.h == 0 || !s.h.is_multiple_of(32) {
        return Err(GraphError::BadInput(s));
    }
    Ok(())
}

fn conv_shape(id: &str, p: &ConvParams, s: Shape) -> Result<Shape> {
    if s.c != p.in_channels {
        return Err(GraphError::at(
            id,
            TensorError::DimMismatch {
                op: "conv2d",
                dim: "in_channels",
                expected: p.in_channels,
                actual: s.c,
            },
        ));
    }
    let (h, w) = p.output_hw(s.h, s.w).map_err(|e| GraphError::at(id, e))?;
    Ok(Shape::new(s.n, p.out_channels, h, w))
}

fn expect_channels(id: &str, block: &'static str, expected: usize, s: Shape) -> Result<()> {
    if s.c != expected {
        return Err(GraphError::at(
            id,
            BlockError::Channels {
                block,
                expected,
                actual: s.c,
            },
        ));
    }
    Ok(())
}

fn node_shape(node: &LayerNode, ins: &[Shape]) -> Result<Shape> {
    let id = node.id.as_str();
    let s = ins[0];
    match &node.kind {
        LayerKind::Conv { params, .. } | LayerKind::Head(params) => conv_shape(id, params, s),
        LayerKind::Pool { k, stride, .. } => {
            if *k == 0 || *stride == 0 || s.h < *k || s.w < *k {
                return Err(GraphError::at(
                    id,
                    TensorError::WindowTooLarge {
                        op: "pool2d",
                        k: *k,
                        size: s.h.min(s.w),
                    },
                ));
            }
            Ok(Shape::new(s.n, s.c, (s.h - k) / stride + 1, (s.w - k) / stride + 1))
        }
        LayerKind::Upsample => Ok(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w)),
        LayerKind::Concat => {
            let t = ins[1];
            if (s.n, s.h, s.w) != (t.n, t.h, t.w) {
                return Err(GraphError::at(
                    id,
                    TensorError::Incompatible {
                        op: "concat_channels",
                        lhs: s,
                        rhs: t,
                    },
                ));
            }
            Ok(Shape::new(s.n, s.c + t.c, s.h, s.w))
        }
        LayerKind::Add => {
            if s != ins[1] {
                return Err(GraphError::at(
                    id,
                    TensorError::Incompatible {
                        op: "add",
                        lhs: s,
                        rhs: ins[1],
                    },
                ));
            }
            Ok(s)
        }
        LayerKind::Csp(b) => {
            expect_channels(id, "csp", b.channels, s)?;
            Ok(b.output_shape(s))
        }
        LayerKind::ResBlockD(b) => {
            expect_channels(id, "resblock_d", b.channels, s)?;
            Ok(b.output_shape(s))
        }
        LayerKind::Aux(b) => {
            expect_channels(id, "aux", b.channels, s)?;
            Ok(b.output_shape(s))
        }
        LayerKind::Cbam(b) => {
            expect_channels(id, "cbam", b.channels, s)?;
            Ok(s)
        }
    }
}

fn eval_node(node: &LayerNode, ins: &[&Tensor], exec: Exec) -> Result<(Tensor, Option<Tensor>)> {
    let id = node.id.as_str();
    let x = ins[0];
    let tensor_err = |e: TensorError| GraphError::at(id, e);
    let block_err = |e: BlockError| GraphError::at(id, e);
    let out = match &node.kind {
        LayerKind::Conv { params, act } => match act {
            Activation::Leaky => cbl(params, x, exec).map_err(tensor_err)?,
            Activation::Linear => conv2d(x, params, exec).map_err(tensor_err)?,
        },
        LayerKind::Head(params) => conv2d(x, params, exec).map_err(tensor_err)?,
        LayerKind::Pool { kind, k, stride } => pool2d(x, *kind, *k, *stride).map_err(tensor_err)?,
        LayerKind::Upsample => upsample_nearest2x(x),
        LayerKind::Concat => concat_channels(x, ins[1]).map_err(tensor_err)?,
        LayerKind::Add => fuse(x, ins[1]).map_err(block_err)?,
        LayerKind::Csp(b) => {
            let o = b.forward(x, exec).map_err(block_err)?;
            return Ok((o.out, Some(o.route)));
        }
        LayerKind::ResBlockD(b) => b.forward(x, exec).map_err(block_err)?,
        LayerKind::Aux(b) => b.forward(x, exec).map_err(block_err)?,
        LayerKind::Cbam(b) => b.forward(x, exec).map_err(block_err)?,
    };
    Ok((out, None))
}

fn cbl_node(id: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize) -> LayerNode {
    LayerNode::new(
        id,
        LayerKind::Conv {
            params: ConvParams::zeros(cin, cout, k, stride, false, true),
            act: Activation::Leaky,
        },
        &[input],
    )
}

fn head_node(id: &str, input: &str, cin: usize, cout: usize) -> LayerNode {
    LayerNode::new(id, LayerKind::Head(ConvParams::zeros(cin, cout, 1, 1, true, false)), &[input])
}

fn csp_node(id: &str, input: &str, c: usize) -> LayerNode {
    LayerNode::new(id, LayerKind::Csp(CspBlock::new(c).expect("even channels")), &[input])
}

/// Neck and both heads, shared by the two variants. `trunk` is the stage-3
/// output (512 ch at stride 32).
fn neck_and_heads(nodes: &mut Vec<LayerNode>, trunk: &str, classes: usize) {
    let out = ANCHORS_PER_SCALE * (5 + classes);
    nodes.push(cbl_node("conv_mid", trunk, 512, 512, 3, 1));
    nodes.push(cbl_node("neck", "conv_mid", 512, 256, 1, 1));
    nodes.push(cbl_node("head13_conv", "neck", 256, 512, 3, 1));
    nodes.push(head_node("head13", "head13_conv", 512, out));
    nodes.push(cbl_node("fpn_conv", "neck", 256, 128, 1, 1));
    nodes.push(LayerNode::new("fpn_upsample", LayerKind::Upsample, &["fpn_conv"]));
    nodes.push(LayerNode::new(
        "fpn_concat",
        LayerKind::Concat,
        &["fpn_upsample", "stage3.route"],
    ));
    nodes.push(cbl_node("head26_conv", "fpn_concat", 384, 256, 3, 1));
    nodes.push(head_node("head26", "head26_conv", 256, out));
}

/// Baseline YOLOv4-tiny: stem, three CSP stages, neck, two heads.
pub fn build_yolov4_tiny(classes: usize) -> Result<NetworkGraph> {
    let mut nodes = vec![
        cbl_node("stem0", INPUT_ID, 3, 32, 3, 2),
        cbl_node("stem1", "stem0", 32, 64, 3, 2),
        csp_node("stage1", "stem1", 64),
        csp_node("stage2", "stage1", 128),
        csp_node("stage3", "stage2", 256),
    ];
    neck_and_heads(&mut nodes, "stage3", classes);
    NetworkGraph::from_nodes(Variant::V4Tiny, classes, nodes, ("head13", "head26"))
}

/// Variant with ResBlock-D stages 1 and 2, each fused with an auxiliary
/// block fed from the stage input.
pub fn build_proposed(classes: usize) -> Result<NetworkGraph> {
    build_proposed_with(classes, true)
}

/// `with_aux = false` drops the auxiliary blocks and fusions.
pub fn build_proposed_with(classes: usize, with_aux: bool) -> Result<NetworkGraph> {
    let mut nodes = vec![
        cbl_node("stem0", INPUT_ID, 3, 32, 3, 2),
        cbl_node("stem1", "stem0", 32, 64, 3, 2),
    ];
    let mut prev = "stem1".to_string();
    for (i, c) in [(1, 64usize), (2, 128)] {
        let stage = format!("stage{i}");
        let block = ResBlockD::new(c).expect("even channels");
        nodes.push(LayerNode::new(&stage, LayerKind::ResBlockD(block), &[prev.as_str()]));
        if with_aux {
            let aux = format!("stage{i}_aux");
            let fused = format!("stage{i}_fuse");
            let block = AuxBlock::new(c, CBAM_REDUCTION).expect("divisible channels");
            nodes.push(LayerNode::new(&aux, LayerKind::Aux(block), &[prev.as_str()]));
            nodes.push(LayerNode::new(&fused, LayerKind::Add, &[stage.as_str(), aux.as_str()]));
            prev = fused;
        } else {
            prev = stage;
        }
    }
    nodes.push(csp_node("stage3", &prev, 256));
    neck_and_heads(&mut nodes, "stage3", classes);
    NetworkGraph::from_nodes(Variant::Proposed, classes, nodes, ("head13", "head26"))
}

pub fn build(variant: Variant, classes: usize) -> Result<NetworkGraph> {
    match variant {
        Variant::V4Tiny => build_yolov4_tiny(classes),
        Variant::Proposed => build_proposed(classes),
    }
}

/// Serializable summary used by the `describe` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub model: Variant,
    pub classes: usize,
    pub input_size: usize,
    pub nodes: Vec<NodeDescription>,
    pub total_params: usize,
    pub conv_layers: usize,
    pub head_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDescription {
    pub id: String,
    pub kind: String,
    pub inputs: Vec<String>,
    pub output_shape: [usize; 4],
    pub params: usize,
}

impl NetworkGraph {
    pub fn describe(&self, input_size: usize) -> Result<GraphDescription> {
        let shapes = self.infer_shapes(Shape::new(1, 3, input_size, input_size))?;
        let nodes = self
            .nodes
            .iter()
            .zip(&shapes)
            .map(|(n, s)| NodeDescription {
                id: n.id.clone(),
                kind: n.kind.name().to_string(),
                inputs: n.inputs.clone(),
                output_shape: s.shape.as_array(),
                params: n.param_count(),
            })
            .collect();
        Ok(GraphDescription {
            model: self.variant,
            classes: self.classes,
            input_size,
            nodes,
            total_params: self.count_params(),
            conv_layers: self.count_layers(),
            head_channels: self.head_channels(),
        })
    }
}

impl GraphDescription {
    /// Aligned plain-text layer table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "model {}  classes {}  input {}x{}\n",
            self.model, self.classes, self.input_size, self.input_size
        );
        s.push_str(&format!(
            "{:<16} {:<11} {:<28} {:>20} {:>10}\n",
            "id", "kind", "inputs", "output", "params"
        ));
        for n in &self.nodes {
            let [b, c, h, w] = n.output_shape;
            s.push_str(&format!(
                "{:<16} {:<11} {:<28} {:>20} {:>10}\n",
                n.id,
                n.kind,
                n.inputs.join(","),
                format!("{b}x{c}x{h}x{w}"),
                n.params
            ));
        }
        s.push_str(&format!(
            "conv layers: {}  parameters: {}  head channels: {}\n",
            self.conv_layers, self.total_params, self.head_channels
        ));
        s
    }
}
