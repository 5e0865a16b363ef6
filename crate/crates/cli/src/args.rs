use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use yoffle_core::arch::{Variant, DEFAULT_CLASSES, DEFAULT_INPUT_SIZE};
use yoffle_core::DType;

#[derive(Debug, Parser)]
#[command(name = "yoffle", version, about = "Compressed single-stage detector toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub opts: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    #[arg(long, global = true, value_enum, default_value = "s+p")]
    pub variant: VariantArg,

    /// Square network input side in pixels; must be a multiple of 32.
    #[arg(long, global = true, default_value_t = DEFAULT_INPUT_SIZE)]
    pub input_size: usize,

    #[arg(long, global = true, default_value_t = DEFAULT_CLASSES)]
    pub classes: usize,

    /// Minimum detection confidence kept after decoding.
    #[arg(long, global = true, default_value_t = 0.25)]
    pub conf: f64,

    /// IoU above which a lower-confidence box of the same class is suppressed.
    #[arg(long, global = true, default_value_t = 0.45)]
    pub nms_iou: f64,

    /// IoU needed for a detection to match ground truth.
    #[arg(long, global = true, default_value_t = 0.5)]
    pub eval_iou: f64,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for per-image processing.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[value(name = "s")]
    S,
    #[value(name = "p")]
    P,
    #[value(name = "s+p")]
    SP,
    #[value(name = "base-csp")]
    BaseCsp,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::S => Variant::S,
            VariantArg::P => Variant::P,
            VariantArg::SP => Variant::SP,
            VariantArg::BaseCsp => Variant::BaseCsp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F16,
    F32,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F16 => DType::F16,
            DTypeArg::F32 => DType::F32,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer and total parameters, MACs, memory traffic and weight bytes.
    Analyze {
        /// Also write analysis.json and analysis.csv here.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },

    /// Write a seeded random weight file for the selected variant.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f16")]
        dtype: DTypeArg,
    },

    /// Detect objects in images; one detection file per image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// Anchor file (`w h` per line); defaults to standard YOLO priors.
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Directory receiving `<image stem>.txt` detection files.
        #[arg(long)]
        out_dir: PathBuf,
        /// Directory receiving copies of the inputs with boxes drawn.
        #[arg(long)]
        annotate_dir: Option<PathBuf>,
        /// Image files or directories of PNG/JPEG images.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },

    /// Single-image forward, decode and NMS latency.
    Bench {
        /// Weight file; seeded random weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },

    /// Per-class AP and mAP of detection files against KITTI labels.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Require IoU 0.7 for cars, as in the official KITTI protocol.
        #[arg(long)]
        kitti_car_iou: bool,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },

    /// Choose anchors by k-means over labelled box sizes.
    Anchors {
        #[arg(long)]
        labels: PathBuf,
        /// Number of anchors; defaults to three per detection scale.
        #[arg(long)]
        k: Option<usize>,
        /// Source image size `WxH`, used to map boxes into network pixels.
        #[arg(long, default_value = "1242x375")]
        image_size: String,
        #[arg(long)]
        out: PathBuf,
    },

    /// Seeded train/val/test split of image ids.
    Split {
        /// Directory whose file stems are the ids (labels or images).
        #[arg(long, conflicts_with = "count", required_unless_present = "count")]
        ids_from: Option<PathBuf>,
        /// Use zero-padded ids 000000 .. count-1.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.3, 0.2])]
        ratios: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}
