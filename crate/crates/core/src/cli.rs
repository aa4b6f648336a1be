//! The `yolite` command-line tool.
//!
//! Exit codes: 0 ok, 2 bad configuration, 3 bad input image, 4 weight file
//! error, 5 selftest failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{flops_of_graph, flops_of_list, reference_csp_layers, reference_resblock_d_layers};
use crate::detect::{decode_head, filter_and_nms, AnchorSet, Detection, DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH};
use crate::image::{letterbox, load_image};
use crate::network::{build, NetworkGraph, Variant, DEFAULT_INPUT_SIZE};
use crate::selftest;
use crate::tensor::{Exec, Shape, Tensor};
use crate::weights_io::{init_seeded, load, zero_all};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_WEIGHTS: u8 = 4;
pub const EXIT_SELFTEST: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "yolite", version, about = "YOLOv4-tiny / ResBlock-D variant inference and analysis")]
pub struct Cli {
    #[command(flatten)]
    pub config: Config,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    V4tiny,
    Proposed,
}

impl From<ModelArg> for Variant {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::V4tiny => Variant::V4Tiny,
            ModelArg::Proposed => Variant::Proposed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Seeded,
    Zero,
}

#[derive(Args, Debug, Clone)]
pub struct Config {
    #[arg(long, global = true, value_enum, default_value = "proposed")]
    pub model: ModelArg,
    #[arg(long, global = true, default_value_t = 80)]
    pub classes: usize,
    /// Square network input side, a multiple of 32.
    #[arg(long, global = true, default_value_t = DEFAULT_INPUT_SIZE)]
    pub input_size: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_CONF_THRESH)]
    pub conf_thresh: f64,
    #[arg(long, global = true, default_value_t = DEFAULT_IOU_THRESH)]
    pub iou_thresh: f64,
    /// Six "w,h" pairs, stride-16 head first: "10,14 23,27 37,58 81,82 135,169 344,319".
    #[arg(long, global = true)]
    pub anchors: Option<String>,
    #[arg(long, global = true, env = "YOLITE_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Weight file to load instead of seeded initialization.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Parameter initialization when no weight file is given.
    #[arg(long, global = true, value_enum, default_value = "seeded")]
    pub init: InitArg,
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the layer table, parameter total and conv layer count.
    Describe,
    /// Per-layer FLOPs table and totals.
    Flops {
        /// Print the reference CSPBlock and ResBlock-D module costs instead.
        #[arg(long)]
        paper_fixtures: bool,
    },
    /// Run detection on a P6 PPM or YLTI raw image.
    Detect { image: PathBuf },
    /// Time forward passes on a synthetic input.
    Bench {
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Benchmark both models side by side.
        #[arg(long)]
        compare: bool,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Input(String),
    Weights(String),
    SelfTest(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Weights(_) => EXIT_WEIGHTS,
            CliError::SelfTest(_) => EXIT_SELFTEST,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Weights(m) => write!(f, "weights error: {m}"),
            CliError::SelfTest(n) => write!(f, "selftest: {n} check(s) failed"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

impl Config {
    pub fn validate(&self) -> CliResult<()> {
        if self.classes == 0 {
            return Err(CliError::Config("--classes must be at least 1".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(CliError::Config(format!(
                "--input-size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        for (name, v) in [("--conf-thresh", self.conf_thresh), ("--iou-thresh", self.iou_thresh)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        self.anchor_set()?;
        Ok(())
    }

    pub fn anchor_set(&self) -> CliResult<AnchorSet> {
        match &self.anchors {
            Some(s) => AnchorSet::parse(s).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(AnchorSet::default()),
        }
    }

    fn graph(&self, variant: Variant) -> CliResult<NetworkGraph> {
        build(variant, self.classes).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Builds the graph and assigns parameters (weight file, zero or seeded).
    fn loaded_graph(&self, variant: Variant) -> CliResult<NetworkGraph> {
        let mut g = self.graph(variant)?;
        match (&self.weights, self.init) {
            (Some(path), _) => {
                load(&mut g, path).map_err(|e| CliError::Weights(format!("{}: {e}", path.display())))?
            }
            (None, InitArg::Zero) => zero_all(&mut g),
            (None, InitArg::Seeded) => init_seeded(&mut g, self.seed),
        }
        Ok(g)
    }
}

/// Parses process arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("yolite: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let cfg = &cli.config;
    cfg.validate()?;
    let text = match &cli.command {
        Command::Describe => cmd_describe(cfg)?,
        Command::Flops { paper_fixtures } => cmd_flops(cfg, *paper_fixtures)?,
        Command::Detect { image } => cmd_detect(cfg, image)?,
        Command::Bench { iters, compare } => cmd_bench(cfg, *iters, *compare)?,
        Command::Selftest => return cmd_selftest(cfg, out),
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Input(format!("writing output: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn cmd_describe(cfg: &Config) -> CliResult<String> {
    let g = cfg.graph(cfg.model.into())?;
    let d = g.describe(cfg.input_size).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(match cfg.format {
        Format::Json => to_json(&d),
        Format::Text => d.to_text(),
    })
}

pub fn cmd_flops(cfg: &Config, reference: bool) -> CliResult<String> {
    let err = |e: crate::analysis::AnalysisError| CliError::Config(e.to_string());
    if reference {
        let csp = flops_of_list(&reference_csp_layers()).map_err(err)?;
        let resd = flops_of_list(&reference_resblock_d_layers()).map_err(err)?;
        let ratio = csp.total as f64 / resd.total as f64;
        return Ok(match cfg.format {
            Format::Json => to_json(&json!({
                "cspblock": csp,
                "resblock_d": resd,
                "ratio": ratio,
            })),
            Format::Text => format!(
                "cspblock    {}\nresblock_d  {}\nratio       {:.4}\n",
                csp.total, resd.total, ratio
            ),
        });
    }
    let g = cfg.graph(cfg.model.into())?;
    let report = flops_of_graph(&g, cfg.input_size).map_err(err)?;
    Ok(match cfg.format {
        Format::Json => to_json(&json!({
            "model": g.variant(),
            "input_size": cfg.input_size,
            "report": report,
        })),
        Format::Text => format!(
            "model {}  input {}x{}\n{}",
            g.variant(),
            cfg.input_size,
            cfg.input_size,
            report.to_text()
        ),
    })
}

/// Rounds to 6 significant digits for output.
fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

#[derive(Serialize)]
struct BoxOut {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize)]
struct DetectionOut {
    class_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_name: Option<&'static str>,
    confidence: f64,
    #[serde(rename = "box")]
    bbox: BoxOut,
}

/// Full detection pipeline on an already letterboxed input.
pub fn detect_tensor(
    g: &NetworkGraph,
    input: &Tensor,
    anchors: &AnchorSet,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>, String> {
    let size = input.shape().h;
    let (coarse, fine) = g.forward(input, Exec::Parallel).map_err(|e| e.to_string())?;
    let mut dets = decode_head(&coarse, &anchors.coarse, size).map_err(|e| e.to_string())?;
    dets.extend(decode_head(&fine, &anchors.fine, size).map_err(|e| e.to_string())?);
    Ok(filter_and_nms(&dets, conf_thresh, iou_thresh))
}

pub fn cmd_detect(cfg: &Config, image: &std::path::Path) -> CliResult<String> {
    let img = load_image(image).map_err(|e| CliError::Input(format!("{}: {e}", image.display())))?;
    let g = cfg.loaded_graph(cfg.model.into())?;
    let lb = letterbox(&img, cfg.input_size);
    let dets = detect_tensor(&g, &lb.tensor, &cfg.anchor_set()?, cfg.conf_thresh, cfg.iou_thresh)
        .map_err(CliError::Input)?;
    let names = (cfg.classes == COCO_NAMES.len()).then_some(COCO_NAMES);
    let dets: Vec<DetectionOut> = dets
        .iter()
        .map(|d| {
            let b = lb.unmap(&d.bbox);
            DetectionOut {
                class_id: d.class_id,
                class_name: names.map(|n| n[d.class_id]),
                confidence: sig6(d.confidence),
                bbox: BoxOut {
                    cx: sig6(b.cx),
                    cy: sig6(b.cy),
                    w: sig6(b.w),
                    h: sig6(b.h),
                },
            }
        })
        .collect();
    Ok(match cfg.format {
        Format::Json => to_json(&dets),
        Format::Text => {
            let mut s = format!("{} detection(s)\n", dets.len());
            for d in &dets {
                s.push_str(&format!(
                    "{:>3} {:<16} {:.4}  cx {:.1} cy {:.1} w {:.1} h {:.1}\n",
                    d.class_id,
                    d.class_name.unwrap_or("-"),
                    d.confidence,
                    d.bbox.cx,
                    d.bbox.cy,
                    d.bbox.w,
                    d.bbox.h
                ));
            }
            s
        }
    })
}

#[derive(Serialize)]
struct BenchOut {
    model: Variant,
    input_size: usize,
    iters: usize,
    mean_ms: f64,
    min_ms: f64,
    fps: f64,
}

fn bench_one(cfg: &Config, variant: Variant, iters: usize) -> CliResult<BenchOut> {
    let g = cfg.loaded_graph(variant)?;
    let x = Tensor::full(Shape::new(1, 3, cfg.input_size, cfg.input_size), 0.5);
    let mut times = Vec::with_capacity(iters);
    let start = Instant::now();
    for _ in 0..iters {
        let t = Instant::now();
        g.forward(&x, Exec::Parallel).map_err(|e| CliError::Config(e.to_string()))?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let total = start.elapsed().as_secs_f64();
    Ok(BenchOut {
        model: variant,
        input_size: cfg.input_size,
        iters,
        mean_ms: times.iter().sum::<f64>() / iters as f64,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        fps: iters as f64 / total,
    })
}

pub fn cmd_bench(cfg: &Config, iters: usize, compare: bool) -> CliResult<String> {
    if iters == 0 {
        return Err(CliError::Config("--iters must be at least 1".into()));
    }
    let variants = if compare {
        vec![Variant::V4Tiny, Variant::Proposed]
    } else {
        vec![cfg.model.into()]
    };
    let results = variants
        .into_iter()
        .map(|v| bench_one(cfg, v, iters))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(match cfg.format {
        Format::Json => to_json(&results),
        Format::Text => {
            let mut s = format!("{:<10} {:>6} {:>10} {:>10} {:>8}\n", "model", "iters", "mean ms", "min ms", "fps");
            for r in &results {
                s.push_str(&format!(
                    "{:<10} {:>6} {:>10.2} {:>10.2} {:>8.2}\n",
                    r.model.to_string(),
                    r.iters,
                    r.mean_ms,
                    r.min_ms,
                    r.fps
                ));
            }
            s
        }
    })
}

fn cmd_selftest(cfg: &Config, out: &mut dyn Write) -> CliResult<()> {
    let checks = selftest::run(cfg.model.into(), cfg.classes, cfg.seed, cfg.weights.as_deref());
    let failed = checks.iter().filter(|c| !c.passed).count();
    let text = match cfg.format {
        Format::Json => to_json(&json!({ "checks": checks, "failed": failed })),
        Format::Text => {
            let mut s = String::new();
            for c in &checks {
                s.push_str(&format!(
                    "{} {:<22} {}\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                ));
            }
            s
        }
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Input(format!("writing output: {e}")))?;
    if failed > 0 {
        return Err(CliError::SelfTest(failed));
    }
    Ok(())
}

pub const COCO_NAMES: &[&str] = &[
    "person", "bicycle", "car", "motorbike", "aeroplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "sofa", "pottedplant", "bed",
    "diningtable", "toilet", "tvmonitor", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];
