use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slideseg_core::bench::PhantomKind;
use slideseg_core::prompt::{BBox, Prompt};
use slideseg_core::volume::Axis;

#[derive(Debug, Parser)]
#[command(name = "slideseg", version, about = "Slice-propagated promptable segmentation of 3D volumes")]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, env = "SLIDESEG_SEED")]
    pub seed: Option<u64>,

    /// Worker threads (and service job workers).
    #[arg(long, global = true, env = "SLIDESEG_JOBS")]
    pub jobs: Option<usize>,

    /// JSON run configuration. Flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom volume and its ground-truth mask.
    Synth(SynthArgs),
    /// Clip and normalize a volume to the [0, 255] working range.
    Preprocess(PreprocessArgs),
    /// Fine-tune a model on labelled volumes and pseudo-label records.
    Train(TrainArgs),
    /// Generate pseudo-label records for an unlabelled volume.
    Pseudo(PseudoArgs),
    /// Segment a volume from one prompt (or a point grid) on one slice.
    Infer(InferArgs),
    /// Run a synthetic benchmark suite and print a CSV table.
    Eval(EvalArgs),
    /// Start the HTTP annotation service.
    Serve(ServeArgs),
}

/// Which window predictor to run.
#[derive(Debug, Clone, Args)]
pub struct PredictorArgs {
    /// Trained checkpoint (.safetensors).
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,

    /// Use the intensity-threshold predictor instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub intensity: bool,

    /// Threshold of the intensity predictor.
    #[arg(long, requires = "intensity", default_value_t = 110.0)]
    pub threshold: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize, pub usize);

pub fn parse_shape(s: &str) -> Result<Shape, String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad shape '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok(Shape(n, n, n)),
        [d, h, w] => Ok(Shape(d, h, w)),
        _ => Err(format!("shape must be N or DxHxW, got '{s}'")),
    }
}

pub fn parse_kind(s: &str) -> Result<PhantomKind, String> {
    s.parse().map_err(|e: slideseg_core::Error| e.to_string())
}

pub fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: slideseg_core::Error| e.to_string())
}

/// `box:x0,y0,x1,y1` or `point:x,y`.
pub fn parse_prompt(s: &str) -> Result<Prompt, String> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| format!("prompt must look like box:x0,y0,x1,y1 or point:x,y, got '{s}'"))?;
    let nums: Vec<usize> = rest
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad coordinate '{v}': {e}")))
        .collect::<Result<_, _>>()?;
    match (kind, &nums[..]) {
        ("box", &[x0, y0, x1, y1]) => {
            if x0 > x1 || y0 > y1 {
                return Err(format!("box corners are inverted in '{s}'"));
            }
            Ok(Prompt::Box(BBox::new(x0, y0, x1, y1)))
        }
        ("point", &[x, y]) => Ok(Prompt::point(x, y)),
        ("box", _) => Err(format!("box needs 4 coordinates, got {}", nums.len())),
        ("point", _) => Err(format!("point needs 2 coordinates, got {}", nums.len())),
        _ => Err(format!("unknown prompt type '{kind}'")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: PhantomKind,

    /// Edge length N or DxHxW.
    #[arg(long, value_parser = parse_shape, default_value = "64")]
    pub shape: Shape,

    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,

    /// Volume id; defaults to `<kind>-<seed>`.
    #[arg(long)]
    pub id: Option<String>,

    /// Draw random geometry instead of the centred default.
    #[arg(long)]
    pub random: bool,

    /// Gaussian noise sigma in [0, 255] units.
    #[arg(long)]
    pub noise: Option<f32>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Volume sidecar (.vol.json) or raw (.vol.raw) path.
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of volumes; those with a `<id>.mask.rle.json` give
    /// volumetric windows.
    #[arg(long)]
    pub data: PathBuf,

    /// Pseudo-label record files; their volumes are looked up in `--data`.
    #[arg(long)]
    pub pseudo: Vec<PathBuf>,

    /// Checkpoint to start from. A single-branch checkpoint is expanded to
    /// three branches.
    #[arg(long)]
    pub init: Option<PathBuf>,

    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,

    /// Line-delimited JSON metrics.
    #[arg(long)]
    pub metrics: Option<PathBuf>,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PseudoArgs {
    #[arg(long)]
    pub volume: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub predictor: PredictorArgs,

    #[arg(long, value_parser = parse_axis)]
    pub axis: Option<Axis>,

    /// Pseudo-label every n-th interior slice.
    #[arg(long)]
    pub stride: Option<usize>,

    /// Superpixels per slice.
    #[arg(long)]
    pub segments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub volume: PathBuf,

    /// Output mask (.mask.rle.json).
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub predictor: PredictorArgs,

    #[arg(long, value_parser = parse_axis, default_value = "z")]
    pub axis: Axis,

    #[arg(long)]
    pub start_index: usize,

    /// `box:x0,y0,x1,y1` or `point:x,y` on the start slice.
    #[arg(long, value_parser = parse_prompt, required_unless_present = "everything", conflicts_with = "everything")]
    pub prompt: Option<Prompt>,

    /// Seed every object on the start slice from a point grid.
    #[arg(long)]
    pub everything: bool,

    #[arg(long)]
    pub max_batch: Option<usize>,

    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// 5x5 grid of box translations and scales.
    Noisy,
    /// Single-box propagation Dice.
    Propagation,
    /// Volumes annotated within a prompt budget, propagation vs per slice.
    Efficiency,
    /// Propagation Dice as z spacing coarsens.
    Zspacing,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,

    #[command(flatten)]
    pub predictor: PredictorArgs,

    /// Number of phantom volumes.
    #[arg(long, default_value_t = 10)]
    pub count: usize,

    #[arg(long, value_parser = parse_shape, default_value = "32")]
    pub shape: Shape,

    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: PathBuf,

    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,

    #[command(flatten)]
    pub predictor: PredictorArgs,

    #[arg(long, default_value_t = 256)]
    pub max_upload_mb: usize,
}
