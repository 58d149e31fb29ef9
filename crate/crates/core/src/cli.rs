//! Command implementations behind the `critsel` binary.
//!
//! Each command takes a fully merged [`RunConfig`], writes its output files
//! and returns the text meant for standard output. Argument parsing lives in
//! the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{consistency_curve, misalignment_check, MisalignmentReport, ScoredDataset};
use crate::datamodel::{
    load_annotations, load_captions, load_detections, write_filtered_annotations,
    write_json_pretty, Dataset, DetectionSet, LoadOptions,
};
use crate::error::{Error, Result};
use crate::importance::{
    score_dataset, validate_heat_time, validate_threshold, ImportanceSet, SkipReason,
    DEFAULT_HEAT_TIME,
};
use crate::metrics::{
    evaluate, evaluate_filtered, fmt_metric, format_table, EvalConfig, MetricsReport,
};
use crate::semantics::ConceptMap;

/// Thresholds reported in the scoring summary.
pub const SUMMARY_THRESHOLDS: [f64; 3] = [0.075, 0.25, 0.30];

/// Default threshold list for `compare`.
pub const COMPARE_THRESHOLDS: [f64; 3] = [0.0, 0.075, 0.30];

pub const DEFAULT_SWEEP: &str = "0:0.05:0.35";

/// Named thresholds.
pub fn preset_threshold(name: &str) -> Option<f64> {
    match name {
        "vg-knee" => Some(0.075),
        "coco" => Some(0.25),
        "vg-best" => Some(0.30),
        _ => None,
    }
}

fn round_grid(v: f64) -> f64 {
    (v * 1e10).round() / 1e10
}

/// Parses `start:step:stop` (inclusive), a comma-separated list, or a single
/// value.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |msg: &str| Error::Contract(format!("invalid grid {spec:?}: {msg}"));
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(&format!("{s:?} is not a number")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, step, stop] => {
            let (start, step, stop) = (num(start)?, num(step)?, num(stop)?);
            if step <= 0.0 {
                return Err(bad("step must be positive"));
            }
            if stop < start {
                return Err(bad("stop is below start"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=n)
                .map(|i| round_grid(start + i as f64 * step))
                .collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(bad("expected start:step:stop or a comma-separated list")),
    }
}

/// Settings read from a TOML file given with `--config`. Flags override
/// these, and these override built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub concept_map: Option<PathBuf>,
    pub threshold: Option<Vec<f64>>,
    pub heat_time: Option<f64>,
    pub max_det: Option<usize>,
    pub iou_grid: Option<String>,
    pub sweep: Option<String>,
    pub jobs: Option<usize>,
    pub strict: Option<bool>,
}

impl FileConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Effective configuration of one invocation; echoed into JSON outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub annotations: Vec<PathBuf>,
    pub captions: Option<PathBuf>,
    pub detections: Vec<PathBuf>,
    pub concept_map: Option<PathBuf>,
    pub importance: Vec<PathBuf>,
    pub thresholds: Vec<f64>,
    pub heat_time: f64,
    pub iou_grid: Vec<f64>,
    pub max_det: Option<usize>,
    pub sweep: Vec<f64>,
    /// Worker threads; `None` uses every available core.
    #[serde(skip)]
    pub jobs: Option<usize>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub strict: bool,
}

impl RunConfig {
    pub fn new(command: impl Into<String>) -> Self {
        RunConfig {
            command: command.into(),
            annotations: Vec::new(),
            captions: None,
            detections: Vec::new(),
            concept_map: None,
            importance: Vec::new(),
            thresholds: Vec::new(),
            heat_time: DEFAULT_HEAT_TIME,
            iou_grid: EvalConfig::default().iou_thresholds,
            max_det: None,
            sweep: parse_grid(DEFAULT_SWEEP).expect("default sweep parses"),
            jobs: None,
            out: None,
            strict: false,
        }
    }

    /// Checks value ranges and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        for &t in self.thresholds.iter().chain(&self.sweep) {
            validate_threshold(t)?;
        }
        validate_heat_time(self.heat_time)?;
        if self.max_det == Some(0) {
            return Err(Error::Contract("--max-det must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Contract("--jobs must be positive".into()));
        }
        self.eval_config()?;
        let inputs = self
            .annotations
            .iter()
            .chain(&self.captions)
            .chain(&self.detections)
            .chain(&self.concept_map)
            .chain(&self.importance);
        for p in inputs {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
                ));
            }
        }
        Ok(())
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        EvalConfig::new(self.iou_grid.clone(), d.max_detections, d.recall_points)
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            strict: self.strict,
        }
    }

    fn out_path(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("{} needs --out", self.command)))
    }

    fn one<'a>(&self, list: &'a [PathBuf], flag: &str) -> Result<&'a Path> {
        match list {
            [p] => Ok(p),
            [] => Err(Error::Contract(format!("{} needs {flag}", self.command))),
            _ => Err(Error::Contract(format!(
                "{} takes exactly one {flag}",
                self.command
            ))),
        }
    }

    fn single_threshold(&self) -> Result<f64> {
        match self.thresholds.as_slice() {
            [] => Ok(0.0),
            [t] => Ok(*t),
            _ => Err(Error::Contract(format!(
                "{} takes a single threshold",
                self.command
            ))),
        }
    }

    /// Runs `f` on a thread pool sized by `jobs`.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.jobs {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

fn removal_fraction(total: usize, kept: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        (total - kept) as f64 / total as f64
    }
}

fn load_concept_map(cfg: &RunConfig, ds: &Dataset) -> Result<ConceptMap> {
    match &cfg.concept_map {
        Some(p) => ConceptMap::load(p, ds.vocabulary()),
        None => ConceptMap::from_vocabulary(ds.vocabulary()),
    }
}

/// Scores every image and writes the importance file.
pub fn cmd_score(cfg: &RunConfig) -> Result<String> {
    let ann_path = cfg.one(&cfg.annotations, "--annotations")?;
    let cap_path = cfg
        .captions
        .as_deref()
        .ok_or_else(|| Error::Contract("score needs --captions".into()))?;
    let out = cfg.out_path()?;
    let ds = load_annotations(ann_path, cfg.load_options())?;
    let captions = load_captions(cap_path)?;
    let cmap = load_concept_map(cfg, &ds)?;
    let records = cfg.in_pool(|| score_dataset(&ds, &captions, &cmap, cfg.heat_time))??;
    records.write(out)?;

    let mut s = String::new();
    let no_imp = records
        .iter()
        .filter(|r| r.skipped == Some(SkipReason::NoCategoryImportance))
        .count();
    let no_ann = records
        .iter()
        .filter(|r| r.skipped == Some(SkipReason::NoAnnotations))
        .count();
    let _ = writeln!(
        s,
        "scored {} images: {} skipped ({} no-category-importance, {} no-annotations)",
        records.len(),
        no_imp + no_ann,
        no_imp,
        no_ann
    );
    if ds.skipped_annotations() > 0 {
        let _ = writeln!(
            s,
            "{} degenerate annotations skipped at load",
            ds.skipped_annotations()
        );
    }
    let total = ds.annotations().len();
    for t in SUMMARY_THRESHOLDS {
        let kept = records.select_all(t).len();
        let _ = writeln!(
            s,
            "T={t}: {kept}/{total} annotations kept, removal fraction {:.4}",
            removal_fraction(total, kept)
        );
    }
    Ok(s)
}

/// Writes the annotations whose importance exceeds the threshold.
pub fn cmd_select(cfg: &RunConfig) -> Result<String> {
    let ann_path = cfg.one(&cfg.annotations, "--annotations")?;
    let imp_path = cfg.one(&cfg.importance, "--importance")?;
    let threshold = cfg.single_threshold()?;
    let out = cfg.out_path()?;
    let ds = load_annotations(ann_path, cfg.load_options())?;
    let records = ImportanceSet::load(imp_path)?;
    records.check_against(&ds)?;
    let keep = records.select_all(threshold);
    write_filtered_annotations(&ds, &keep, out)?;
    let total = ds.annotations().len();
    Ok(format!(
        "T={threshold}: kept {}/{} annotations, removal fraction {:.4}\n",
        keep.len(),
        total,
        removal_fraction(total, keep.len())
    ))
}

fn load_dets(cfg: &RunConfig, path: &Path, ds: &Dataset) -> Result<DetectionSet> {
    let dets = load_detections(path, ds.vocabulary(), cfg.load_options())?;
    if dets.total_records > 0 && dets.skipped_unknown_category == dets.total_records {
        return Err(Error::Contract(format!(
            "{}: vocabulary mismatch, no detection category id exists in the annotations",
            path.display()
        )));
    }
    Ok(match cfg.max_det {
        Some(k) => dets.capped_per_image(k),
        None => dets,
    })
}

fn report_json(cfg: &RunConfig, eval: &EvalConfig, report: &MetricsReport) -> serde_json::Value {
    json!({
        "config": { "run": cfg, "eval": eval },
        "totals": report.totals,
        "metrics": report.metrics,
        "mar_by_cap": report.mar_by_cap,
        "per_category": report.per_category,
    })
}

/// Evaluates one detection file, optionally against an importance-selected
/// subset.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let ann_path = cfg.one(&cfg.annotations, "--annotations")?;
    let det_path = cfg.one(&cfg.detections, "--detections")?;
    let eval = cfg.eval_config()?;
    let ds = load_annotations(ann_path, cfg.load_options())?;
    let dets = load_dets(cfg, det_path, &ds)?;
    let report = cfg.in_pool(|| -> Result<MetricsReport> {
        match cfg.importance.as_slice() {
            [] => evaluate(&dets, &ds, &eval),
            [imp] => {
                let records = ImportanceSet::load(imp)?;
                evaluate_filtered(&dets, &ds, &records, cfg.single_threshold()?, &eval)
            }
            _ => Err(Error::Contract(
                "evaluate takes at most one --importance".into(),
            )),
        }
    })??;
    if let Some(out) = &cfg.out {
        write_json_pretty(out, &report_json(cfg, &eval, &report))?;
    }
    Ok(format_table(&report))
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    detector: String,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    precision_50: Option<f64>,
}

/// Table-per-threshold comparison of two or more detectors with rank-flip
/// checks against the full annotation set.
pub fn cmd_compare(cfg: &RunConfig) -> Result<String> {
    if cfg.detections.len() < 2 {
        return Err(Error::Contract(format!(
            "compare needs at least two --detections files, got {}",
            cfg.detections.len()
        )));
    }
    let ann_path = cfg.one(&cfg.annotations, "--annotations")?;
    let imp_path = cfg.one(&cfg.importance, "--importance")?;
    let eval = cfg.eval_config()?;
    let ds = load_annotations(ann_path, cfg.load_options())?;
    let records = ImportanceSet::load(imp_path)?;
    records.check_against(&ds)?;
    let thresholds: Vec<f64> = if cfg.thresholds.is_empty() {
        COMPARE_THRESHOLDS.to_vec()
    } else {
        cfg.thresholds.clone()
    };

    let mut detectors = Vec::with_capacity(cfg.detections.len());
    for p in &cfg.detections {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        detectors.push((name, load_dets(cfg, p, &ds)?));
    }

    let reports: Vec<MisalignmentReport> = cfg.in_pool(|| {
        thresholds
            .iter()
            .map(|&t| misalignment_check(&detectors, &ds, &records, t, &eval))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut text = String::new();
    let mut blocks = Vec::new();
    let width = detectors
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max(8);
    for report in &reports {
        let rows: Vec<CompareRow> = report
            .detectors
            .iter()
            .map(|d| CompareRow {
                detector: d.name.clone(),
                precision: d.critical.map50,
                recall: d.critical.mar1_50,
                f1: d.critical.f1,
                precision_50: d.precision_critical,
            })
            .collect();
        let _ = writeln!(text, "T={}", report.threshold);
        let _ = writeln!(
            text,
            "{:<width$} {:>8} {:>8} {:>8}",
            "detector", "P", "R", "F"
        );
        for r in &rows {
            let _ = writeln!(
                text,
                "{:<width$} {:>8} {:>8} {:>8}",
                r.detector,
                fmt_metric(r.precision),
                fmt_metric(r.recall),
                fmt_metric(r.f1)
            );
        }
        text.push_str(&report.format_table());
        text.push('\n');
        blocks.push(json!({ "threshold": report.threshold, "rows": rows, "misalignment": report }));
    }
    let flips: Vec<f64> = reports
        .iter()
        .filter(|r| r.flipped)
        .map(|r| r.threshold)
        .collect();
    if !flips.is_empty() {
        let list: Vec<String> = flips.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            text,
            "MISALIGNED: detector ranking on the critical subset differs from the full set at T={}",
            list.join(", ")
        );
    }
    if let Some(out) = &cfg.out {
        write_json_pretty(
            out,
            &json!({
                "config": { "run": cfg, "eval": eval },
                "thresholds": blocks,
                "misaligned": !flips.is_empty(),
            }),
        )?;
    }
    Ok(text)
}

/// Consistency curve between two scored datasets.
pub fn cmd_consistency(cfg: &RunConfig) -> Result<String> {
    let [ann_a, ann_b] = cfg.annotations.as_slice() else {
        return Err(Error::Contract(
            "consistency needs two --annotations files (first: fixed threshold, second: swept)"
                .into(),
        ));
    };
    let [imp_a, imp_b] = cfg.importance.as_slice() else {
        return Err(Error::Contract(
            "consistency needs two --importance files, one per --annotations".into(),
        ));
    };
    let out = cfg.out_path()?;
    let fixed = cfg.single_threshold()?;
    let ds_a = load_annotations(ann_a, cfg.load_options())?;
    let ds_b = load_annotations(ann_b, cfg.load_options())?;
    let rec_a = ImportanceSet::load(imp_a)?;
    let rec_b = ImportanceSet::load(imp_b)?;
    rec_a.check_against(&ds_a)?;
    rec_b.check_against(&ds_b)?;
    let curve = consistency_curve(
        ScoredDataset {
            dataset: &ds_a,
            records: &rec_a,
        },
        ScoredDataset {
            dataset: &ds_b,
            records: &rec_b,
        },
        fixed,
        &cfg.sweep,
    )?;
    curve.write_csv(out)?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} shared images, fixed T={} on the first dataset, {} sweep steps",
        curve.shared_images,
        fixed,
        curve.rows.len()
    );
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |t| t.to_string());
    let _ = writeln!(s, "highest mean IOU at T={}", show(curve.best_threshold()));
    let _ = writeln!(
        s,
        "inflection estimate at T={}",
        show(curve.inflection_threshold())
    );
    Ok(s)
}

/// Dispatches on `cfg.command` after validation.
pub fn run(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    match cfg.command.as_str() {
        "score" => cmd_score(cfg),
        "select" => cmd_select(cfg),
        "evaluate" => cmd_evaluate(cfg),
        "compare" => cmd_compare(cfg),
        "consistency" => cmd_consistency(cfg),
        other => Err(Error::Contract(format!("unknown command {other:?}"))),
    }
}
