//! Detection metrics against an arbitrary ground-truth subset.
//!
//! Matching and accumulation follow the COCO protocol for boxes: detections
//! are matched greedily in score order, precision is interpolated at evenly
//! spaced recall levels, and recall is read at per-image detection caps.
//! There are no crowd or area-range ignore regions; an annotation outside the
//! evaluated subset is simply absent, so a detection that would have matched
//! it counts as a false positive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    Annotation, AnnotationId, CategoryId, Dataset, Detection, DetectionSet, ImageId,
};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::importance::{select, ImportanceSet};

/// IOU threshold used for the fixed-threshold metrics and pooled precision.
pub const IOU_50: f64 = 0.5;
pub const IOU_75: f64 = 0.75;

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: Vec<usize>,
    pub recall_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95],
            max_detections: vec![1, 10, 100],
            recall_points: 101,
        }
    }
}

impl EvalConfig {
    pub fn new(
        iou_thresholds: Vec<f64>,
        max_detections: Vec<usize>,
        recall_points: usize,
    ) -> Result<Self> {
        let cfg = EvalConfig {
            iou_thresholds,
            max_detections,
            recall_points,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Contract("IOU threshold list is empty".into()));
        }
        if self.iou_thresholds.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::Contract(format!(
                "IOU thresholds must lie in (0, 1]: {:?}",
                self.iou_thresholds
            )));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(
                "IOU thresholds must be strictly increasing".into(),
            ));
        }
        if self.max_detections.is_empty() || self.max_detections.contains(&0) {
            return Err(Error::Contract("detection caps must be positive".into()));
        }
        if self.max_detections.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(
                "detection caps must be strictly increasing".into(),
            ));
        }
        if self.recall_points < 2 {
            return Err(Error::Contract(
                "at least two recall points are required".into(),
            ));
        }
        Ok(())
    }

    /// Recall levels `0, 1/(R-1), ..., 1`.
    pub fn recall_levels(&self) -> Vec<f64> {
        let last = self.recall_points - 1;
        let step = 1.0 / last as f64;
        (0..self.recall_points)
            .map(|i| if i == last { 1.0 } else { i as f64 * step })
            .collect()
    }

    fn iou_index(&self, gamma: f64) -> Option<usize> {
        self.iou_thresholds
            .iter()
            .position(|&g| approx_eq(g, gamma))
    }

    fn cap_index(&self, cap: usize) -> Option<usize> {
        self.max_detections.iter().position(|&c| c == cap)
    }

    fn largest_cap(&self) -> usize {
        *self.max_detections.last().expect("validated non-empty")
    }
}

/// Greedy matching of one image and category at one IOU threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Matched annotation for each detection, in the order given.
    pub detections: Vec<Option<AnnotationId>>,
    /// Whether each annotation (in the order given) was matched.
    pub annotations: Vec<bool>,
}

impl MatchResult {
    pub fn matched_detections(&self) -> usize {
        self.detections.iter().filter(|m| m.is_some()).count()
    }
}

/// Matches `dets` (sorted by descending score) to `gts` at threshold `gamma`.
///
/// Each detection takes the unmatched annotation with the highest IOU if that
/// IOU reaches `gamma`. Equal IOUs go to the lower annotation id.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], gamma: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| gts[g].id);
    let mut taken = vec![false; gts.len()];
    let detections = dets
        .iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, &gts[g].bbox);
                if v < gamma {
                    continue;
                }
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            best.map(|(_, g)| {
                taken[g] = true;
                gts[g].id
            })
        })
        .collect();
    MatchResult {
        detections,
        annotations: taken,
    }
}

/// Fraction of detections matched at `gamma`; `None` without detections.
pub fn precision_at(dets: &[Detection], gts: &[Annotation], gamma: f64) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    let m = match_detections(dets, gts, gamma);
    Some(m.matched_detections() as f64 / dets.len() as f64)
}

/// Interpolated average precision from a score-ordered true-positive sequence.
/// `None` when there is no ground truth.
pub fn interpolated_ap(tp: &[bool], num_gt: usize, recall_levels: &[f64]) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let n = tp.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let (mut tps, mut fps) = (0.0f64, 0.0f64);
    for &hit in tp {
        if hit {
            tps += 1.0;
        } else {
            fps += 1.0;
        }
        recall.push(tps / num_gt as f64);
        precision.push(tps / (tps + fps));
    }
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut ptr = 0;
    for &r in recall_levels {
        while ptr < n && recall[ptr] < r {
            ptr += 1;
        }
        if ptr < n {
            sum += precision[ptr];
        }
    }
    Some(sum / recall_levels.len() as f64)
}

/// Average precision of one image and category.
pub fn average_precision(
    dets: &[Detection],
    gts: &[Annotation],
    gamma: f64,
    recall_levels: &[f64],
) -> Option<f64> {
    let m = match_detections(dets, gts, gamma);
    let tp: Vec<bool> = m.detections.iter().map(Option::is_some).collect();
    interpolated_ap(&tp, gts.len(), recall_levels)
}

/// Harmonic mean of precision and recall.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub map: Option<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    pub mar1: Option<f64>,
    pub mar10: Option<f64>,
    pub mar100: Option<f64>,
    pub mar1_50: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category_id: CategoryId,
    pub name: String,
    pub num_gt: usize,
    pub num_detections: usize,
    /// AP at each IOU threshold; `None` for categories without ground truth.
    pub ap: Vec<Option<f64>>,
    /// Recall at each detection cap (outer) and IOU threshold (inner).
    pub recall: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub images_evaluated: usize,
    pub images_skipped: usize,
    pub gt_annotations: usize,
    pub gt_annotations_removed: usize,
    pub detections: usize,
    pub detections_matched_50: usize,
    /// Detections on images outside the evaluation.
    pub detections_ignored: usize,
    pub categories_evaluated: usize,
    pub categories_excluded: usize,
    /// Matched detections over all detections at IOU 0.5, pooled over
    /// images and categories.
    pub precision_50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub totals: Totals,
    pub metrics: Metrics,
    /// Mean recall at every configured cap, keyed by cap.
    pub mar_by_cap: BTreeMap<usize, Option<f64>>,
    pub per_category: Vec<CategoryMetrics>,
}

/// Per (image, category) matching outcome.
struct ImageCategoryEval {
    category_id: CategoryId,
    scores: Vec<f64>,
    /// `tp[threshold][detection]`
    tp: Vec<Vec<bool>>,
    num_gt: usize,
}

struct ImageEval {
    cells: Vec<ImageCategoryEval>,
    detections: usize,
    matched_50: usize,
}

fn evaluate_image(dets: &[Detection], gts: &[Annotation], cfg: &EvalConfig) -> ImageEval {
    let cap = cfg.largest_cap();
    let cats: BTreeSet<CategoryId> = dets
        .iter()
        .map(|d| d.category_id)
        .chain(gts.iter().map(|g| g.category_id))
        .collect();
    let mut cells = Vec::with_capacity(cats.len());
    let mut detections = 0;
    let mut matched_50 = 0;
    for cat in cats {
        let cd: Vec<Detection> = dets
            .iter()
            .filter(|d| d.category_id == cat)
            .take(cap)
            .copied()
            .collect();
        let cg: Vec<Annotation> = gts
            .iter()
            .filter(|g| g.category_id == cat)
            .copied()
            .collect();
        let tp = cfg
            .iou_thresholds
            .iter()
            .map(|&gamma| {
                match_detections(&cd, &cg, gamma)
                    .detections
                    .iter()
                    .map(Option::is_some)
                    .collect()
            })
            .collect();
        detections += cd.len();
        matched_50 += match_detections(&cd, &cg, IOU_50).matched_detections();
        cells.push(ImageCategoryEval {
            category_id: cat,
            scores: cd.iter().map(|d| d.score).collect(),
            tp,
            num_gt: cg.len(),
        });
    }
    ImageEval {
        cells,
        detections,
        matched_50,
    }
}

/// Ground truth of the images taking part in an evaluation.
struct GroundTruth {
    images: Vec<(ImageId, Vec<Annotation>)>,
    skipped: usize,
    removed: usize,
}

fn run(
    dets: &DetectionSet,
    ds: &Dataset,
    gt: GroundTruth,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if gt.images.is_empty() {
        return Err(Error::NoEvaluableImages);
    }
    let evaluated: BTreeSet<ImageId> = gt.images.iter().map(|(id, _)| *id).collect();
    let per_image: Vec<ImageEval> = gt
        .images
        .par_iter()
        .map(|(id, anns)| evaluate_image(dets.image(*id), anns, cfg))
        .collect();

    let levels = cfg.recall_levels();
    let n_thr = cfg.iou_thresholds.len();
    let cap = cfg.largest_cap();

    // category -> per-image cells in image order
    let mut by_cat: BTreeMap<CategoryId, Vec<&ImageCategoryEval>> = BTreeMap::new();
    for img in &per_image {
        for cell in &img.cells {
            by_cat.entry(cell.category_id).or_default().push(cell);
        }
    }

    let mut per_category = Vec::with_capacity(ds.vocabulary().len());
    for cat in ds.vocabulary().categories() {
        let cells = by_cat.get(&cat.id).map(Vec::as_slice).unwrap_or(&[]);
        let num_gt: usize = cells.iter().map(|c| c.num_gt).sum();
        let num_detections: usize = cells.iter().map(|c| c.scores.len()).sum();

        let mut recall = Vec::with_capacity(cfg.max_detections.len());
        let mut ap = vec![None; n_thr];
        for &k in &cfg.max_detections {
            // (score, tp flags) of each image's top-k, concatenated in image order
            let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
            for (ci, c) in cells.iter().enumerate() {
                for d in 0..c.scores.len().min(k) {
                    pooled.push((c.scores[d], ci, d));
                }
            }
            // stable: equal scores keep image order
            pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut rec_k = Vec::with_capacity(n_thr);
            for (t, ap_t) in ap.iter_mut().enumerate() {
                let tp: Vec<bool> = pooled
                    .iter()
                    .map(|&(_, ci, d)| cells[ci].tp[t][d])
                    .collect();
                if num_gt == 0 {
                    rec_k.push(None);
                    continue;
                }
                let hits = tp.iter().filter(|&&h| h).count();
                rec_k.push(Some(hits as f64 / num_gt as f64));
                if k == cap {
                    *ap_t = interpolated_ap(&tp, num_gt, &levels);
                }
            }
            recall.push(rec_k);
        }
        per_category.push(CategoryMetrics {
            category_id: cat.id,
            name: cat.name.clone(),
            num_gt,
            num_detections,
            ap,
            recall,
        });
    }

    let scored: Vec<&CategoryMetrics> = per_category.iter().filter(|c| c.num_gt > 0).collect();
    if scored.is_empty() {
        return Err(Error::NoCategories);
    }

    let mean = |values: &mut dyn Iterator<Item = f64>| -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in values {
            sum += v;
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    };
    let map = mean(&mut scored.iter().flat_map(|c| c.ap.iter().flatten().copied()));
    let ap_at = |gamma: f64| {
        cfg.iou_index(gamma)
            .and_then(|t| mean(&mut scored.iter().filter_map(|c| c.ap[t])))
    };
    let mar_at = |k: usize| {
        cfg.cap_index(k).and_then(|m| {
            mean(
                &mut scored
                    .iter()
                    .flat_map(|c| c.recall[m].iter().flatten().copied()),
            )
        })
    };
    let mar1_50 = match (cfg.cap_index(1), cfg.iou_index(IOU_50)) {
        (Some(m), Some(t)) => mean(&mut scored.iter().filter_map(|c| c.recall[m][t])),
        _ => None,
    };
    let map50 = ap_at(IOU_50);
    let metrics = Metrics {
        map,
        map50,
        map75: ap_at(IOU_75),
        mar1: mar_at(1),
        mar10: mar_at(10),
        mar100: mar_at(100),
        mar1_50,
        f1: f1_score(map50, mar1_50),
    };
    let mar_by_cap = cfg.max_detections.iter().map(|&k| (k, mar_at(k))).collect();

    let detections: usize = per_image.iter().map(|i| i.detections).sum();
    let matched_50: usize = per_image.iter().map(|i| i.matched_50).sum();
    let ignored = dets
        .iter()
        .filter(|(id, _)| !evaluated.contains(id))
        .map(|(_, d)| d.len())
        .sum();
    let totals = Totals {
        images_evaluated: gt.images.len(),
        images_skipped: gt.skipped,
        gt_annotations: gt.images.iter().map(|(_, a)| a.len()).sum(),
        gt_annotations_removed: gt.removed,
        detections,
        detections_matched_50: matched_50,
        detections_ignored: ignored,
        categories_evaluated: scored.len(),
        categories_excluded: per_category.len() - scored.len(),
        precision_50: (detections > 0).then(|| matched_50 as f64 / detections as f64),
    };

    Ok(MetricsReport {
        totals,
        metrics,
        mar_by_cap,
        per_category,
    })
}

/// Evaluates `dets` against every annotation of `ds`.
pub fn evaluate(dets: &DetectionSet, ds: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    let images = ds
        .image_ids()
        .map(|id| (id, ds.image_annotations(id).copied().collect()))
        .collect();
    run(
        dets,
        ds,
        GroundTruth {
            images,
            skipped: 0,
            removed: 0,
        },
        cfg,
    )
}

/// Which annotations of each scored image form the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Subset {
    /// Annotations with propagated importance above the threshold.
    Critical(f64),
    /// Annotations at or below the threshold.
    Complement(f64),
}

/// Evaluates against the annotations selected by importance.
///
/// Skipped images are left out entirely, including their detections.
/// Annotations outside the subset are removed, not ignored.
pub fn evaluate_subset(
    dets: &DetectionSet,
    ds: &Dataset,
    records: &ImportanceSet,
    subset: Subset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let threshold = match subset {
        Subset::Critical(t) | Subset::Complement(t) => t,
    };
    crate::importance::validate_threshold(threshold)?;
    records.check_against(ds)?;

    let mut images = Vec::new();
    let (mut skipped, mut removed) = (0, 0);
    for id in ds.image_ids() {
        let all: Vec<Annotation> = ds.image_annotations(id).copied().collect();
        let sel = match records.get(id) {
            Some(rec) => select(rec, threshold),
            // only images without annotations may lack a record
            None => {
                skipped += 1;
                continue;
            }
        };
        if sel.skipped {
            skipped += 1;
            continue;
        }
        let keep: Vec<Annotation> = all
            .iter()
            .filter(|a| match subset {
                Subset::Critical(_) => sel.ids.contains(&a.id),
                Subset::Complement(_) => !sel.ids.contains(&a.id),
            })
            .copied()
            .collect();
        removed += all.len() - keep.len();
        images.push((id, keep));
    }
    run(
        dets,
        ds,
        GroundTruth {
            images,
            skipped,
            removed,
        },
        cfg,
    )
}

pub fn evaluate_filtered(
    dets: &DetectionSet,
    ds: &Dataset,
    records: &ImportanceSet,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    evaluate_subset(dets, ds, records, Subset::Critical(threshold), cfg)
}

pub(crate) fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Aligned plain-text summary of a report.
pub fn format_table(report: &MetricsReport) -> String {
    let m = &report.metrics;
    let rows = [
        ("mAP", m.map),
        ("mAP50", m.map50),
        ("mAP75", m.map75),
        ("mAR1", m.mar1),
        ("mAR10", m.mar10),
        ("mAR100", m.mar100),
        ("mAR1_50", m.mar1_50),
        ("F1", m.f1),
    ];
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8}", "metric", "value");
    for (name, v) in rows {
        let _ = writeln!(out, "{:<10} {:>8}", name, fmt_metric(v));
    }
    let t = &report.totals;
    let _ = writeln!(
        out,
        "images {} (skipped {}), gt {} (removed {}), detections {}, categories {} (excluded {})",
        t.images_evaluated,
        t.images_skipped,
        t.gt_annotations,
        t.gt_annotations_removed,
        t.detections,
        t.categories_evaluated,
        t.categories_excluded
    );
    out
}
