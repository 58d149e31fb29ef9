use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use critsel::cli::{self, parse_grid, preset_threshold, FileConfig, RunConfig};
use critsel::Error;

#[derive(Parser)]
#[command(
    name = "critsel",
    version,
    about = "Caption-driven object importance and critical-subset detection evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every annotation and write an importance file.
    Score(Opts),
    /// Write the annotations whose importance exceeds a threshold.
    Select(Opts),
    /// Evaluate a detection file, optionally on the critical subset.
    Evaluate(Opts),
    /// Compare detectors across thresholds and report ranking flips.
    Compare(Opts),
    /// Sweep a threshold on one dataset against a fixed one on another.
    Consistency(Opts),
}

#[derive(Args)]
struct Opts {
    /// COCO-style annotation file (repeat for consistency).
    #[arg(long)]
    annotations: Vec<PathBuf>,
    /// COCO-style caption file.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// COCO result-format detection file (repeat for compare).
    #[arg(long)]
    detections: Vec<PathBuf>,
    /// TSV of `phrase<TAB>category` synonyms.
    #[arg(long)]
    concept_map: Option<PathBuf>,
    /// Importance file written by `score` (repeat for consistency).
    #[arg(long)]
    importance: Vec<PathBuf>,
    /// Importance threshold in [0, 1); repeat for compare.
    #[arg(short = 'T', long = "threshold")]
    threshold: Vec<f64>,
    /// Named threshold: vg-knee, coco or vg-best.
    #[arg(long, conflicts_with = "threshold")]
    preset: Option<String>,
    /// Diffusion time of the heat kernel.
    #[arg(long)]
    heat_time: Option<f64>,
    /// Keep at most this many top-scoring detections per image.
    #[arg(long)]
    max_det: Option<usize>,
    /// IOU thresholds as start:step:stop or a comma list.
    #[arg(long)]
    iou_grid: Option<String>,
    /// Threshold sweep for consistency, start:step:stop or a comma list.
    #[arg(long)]
    sweep: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Turn skipped records into errors.
    #[arg(long)]
    strict: bool,
    /// TOML file with defaults for the options above.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn build_config(command: &str, o: Opts) -> critsel::Result<RunConfig> {
    let file = match &o.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = RunConfig::new(command);
    cfg.annotations = o.annotations;
    cfg.captions = o.captions;
    cfg.detections = o.detections;
    cfg.importance = o.importance;
    cfg.out = o.out;
    cfg.concept_map = o.concept_map.or(file.concept_map);
    cfg.thresholds = match (&o.preset, o.threshold.is_empty()) {
        (Some(name), _) => vec![preset_threshold(name).ok_or_else(|| {
            Error::Contract(format!(
                "unknown preset {name:?}; expected vg-knee, coco or vg-best"
            ))
        })?],
        (None, false) => o.threshold,
        (None, true) => file.threshold.unwrap_or_default(),
    };
    if let Some(t) = o.heat_time.or(file.heat_time) {
        cfg.heat_time = t;
    }
    cfg.max_det = o.max_det.or(file.max_det);
    if let Some(g) = o.iou_grid.or(file.iou_grid) {
        cfg.iou_grid = parse_grid(&g)?;
    }
    if let Some(s) = o.sweep.or(file.sweep) {
        cfg.sweep = parse_grid(&s)?;
    }
    cfg.jobs = o.jobs.or(file.jobs);
    cfg.strict = o.strict || file.strict.unwrap_or(false);
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CRITSEL_LOG", "warn")).init();
    let args = Cli::parse();
    let (name, opts) = match args.command {
        Command::Score(o) => ("score", o),
        Command::Select(o) => ("select", o),
        Command::Evaluate(o) => ("evaluate", o),
        Command::Compare(o) => ("compare", o),
        Command::Consistency(o) => ("consistency", o),
    };
    let outcome =
        std::panic::catch_unwind(move || build_config(name, opts).and_then(|cfg| cli::run(&cfg)));
    match outcome {
        Ok(Ok(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("critsel {name}: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
        Err(_) => ExitCode::from(1),
    }
}
