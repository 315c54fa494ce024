//! `fruitgrader` command-line workflows and HTTP service.

pub mod api;
mod commands;
pub mod server;
pub mod store;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fruitgrader", version, about = "Mango detection and grading", arg_required_else_help = true)]
pub struct Cli {
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a dataset into train/valid/test and write the split manifest.
    Prepare(PrepareArgs),
    /// Train a ripeness or disease classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train a cascade detector.
    TrainDetector(TrainDetectorArgs),
    /// Confusion matrix of a classifier, or precision/recall of a detector.
    Evaluate(EvaluateArgs),
    /// Grade images with a pipeline and print JSON.
    Grade(GradeArgs),
    /// Bundle a detector and two classifiers into one pipeline file.
    Bundle(BundleArgs),
    /// Serve the JSON API (and optionally the UI).
    Serve(ServeArgs),
    /// Delete stored uploads.
    Gc(GcArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Folder-per-class dataset root.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    pub data: Option<PathBuf>,
    /// Detection annotations `filename,width,height,class,xmin,ymin,xmax,ymax`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Image directory for --csv (default: the CSV's directory).
    #[arg(long, requires = "csv")]
    pub images: Option<PathBuf>,
    /// Train, valid and test fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.3,0")]
    pub fractions: [f64; 3],
    /// Keep exactly N images per class first (folder datasets only).
    #[arg(long, conflicts_with = "csv")]
    pub per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output manifest (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    MiniResnet,
    MiniPlain,
    Resnet18,
    Linear,
}

impl Arch {
    pub fn spec_name(self) -> &'static str {
        match self {
            Arch::MiniResnet => "mini_resnet",
            Arch::MiniPlain => "mini_plain",
            Arch::Resnet18 => "resnet18",
            Arch::Linear => "linear",
        }
    }

    fn default_input(self) -> usize {
        if self == Arch::Resnet18 {
            224
        } else {
            64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Augment {
    None,
    Ripeness,
    Disease,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    /// Folder-per-class dataset root.
    #[arg(long, required_unless_present = "split")]
    pub data: Option<PathBuf>,
    /// Split manifest written by `prepare`; uses its train and valid parts.
    #[arg(long, conflicts_with = "data")]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mini-resnet")]
    pub arch: Arch,
    /// Expected number of classes (checked against the data).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Square input side (default 64, 224 for resnet18).
    #[arg(long)]
    pub input: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Multiply the rate by this every --drop-period epochs.
    #[arg(long, requires = "drop_period")]
    pub drop_factor: Option<f64>,
    #[arg(long, requires = "drop_factor")]
    pub drop_period: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, value_enum, default_value = "none")]
    pub augment: Augment,
    /// Validation share when splitting --data.
    #[arg(long, default_value_t = 0.3)]
    pub valid_frac: f64,
    /// Validate every N epochs.
    #[arg(long, default_value_t = 1)]
    pub valid_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from this network file; its head is replaced when the classes differ.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    /// Directory of positive crops, or an annotation CSV.
    #[arg(long)]
    pub positives: PathBuf,
    /// Image directory for a positives CSV (default: the CSV's directory).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Object class to take from a positives CSV.
    #[arg(long, default_value = "mango")]
    pub class: String,
    /// Directory of images without the object.
    #[arg(long)]
    pub negatives: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub far: f64,
    #[arg(long, default_value_t = 5)]
    pub stages: usize,
    /// `auto` or WxH.
    #[arg(long, default_value = "auto")]
    pub window: String,
    #[arg(long, default_value_t = 0.995)]
    pub tpr_floor: f64,
    #[arg(long, default_value_t = 50)]
    pub max_stumps: usize,
    #[arg(long, default_value_t = 5000)]
    pub features: usize,
    #[arg(long, default_value_t = 1000)]
    pub negatives_per_stage: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output detector (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-stage training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Network file, or a pipeline file together with --kind.
    #[arg(long, alias = "pretrained", conflicts_with = "detector")]
    pub model: Option<PathBuf>,
    /// Classifier to take from a pipeline file.
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<fruitgrader::ModelKind>,
    /// Require the network to have this architecture.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Folder-per-class dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split manifest; evaluates --part of it.
    #[arg(long, conflicts_with = "data")]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "valid")]
    pub part: Part,
    /// Detector (JSON) to evaluate against --csv.
    #[arg(long, requires = "csv")]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value = "mango")]
    pub class: String,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Write confusion.txt, confusion.csv and report.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<f64>| format!("expected three comma-separated fractions, got {}", p.len()))
}

fn parse_kind(s: &str) -> Result<fruitgrader::ModelKind, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct GradeArgs {
    /// Pipeline file.
    #[arg(long)]
    pub model: PathBuf,
    /// Grade disease on every detection.
    #[arg(long)]
    pub force_disease: bool,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BundleArgs {
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub ripeness: PathBuf,
    #[arg(long)]
    pub disease: PathBuf,
    /// Ripeness labels that trigger disease grading (repeatable).
    #[arg(long = "trigger")]
    pub triggers: Vec<String>,
    #[arg(long, default_value_t = fruitgrader::pipeline::DEFAULT_CROP_PADDING)]
    pub padding: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model directory: pipeline.fgpm, or detector.json / ripeness.fgpm / disease.fgpm.
    #[arg(long, env = "FRUITGRADER_MODELS", default_value = "./models")]
    pub models: PathBuf,
    #[arg(long, env = "FRUITGRADER_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Browser origin allowed by CORS.
    #[arg(long)]
    pub ui_origin: Option<String>,
    /// Static UI build to serve.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Upload store directory.
    #[arg(long, default_value = "./store")]
    pub store: PathBuf,
    /// Largest accepted upload in bytes.
    #[arg(long, default_value_t = api::DEFAULT_MAX_UPLOAD)]
    pub max_upload: usize,
}

#[derive(Debug, Args)]
pub struct GcArgs {
    #[arg(long, default_value = "./store")]
    pub store: PathBuf,
    /// Only delete uploads older than this many seconds.
    #[arg(long, default_value_t = 0)]
    pub older_than: u64,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match commands::execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
