//! Studies built on importance scores and metrics: detector rank flips
//! between the critical subset and the full annotation set, quantile groups
//! of annotations by importance, and the cross-dataset consistency curve.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AnnotationId, Dataset, DetectionSet, ImageId};
use crate::error::{Error, Result};
use crate::geometry::{region_jaccard, BBox};
use crate::importance::{select, ImportanceSet};
use crate::metrics::{evaluate, evaluate_subset, fmt_metric, EvalConfig, Metrics, Subset};

/// One detector's precision on the critical subset, the full set and the
/// complement of the critical subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub name: String,
    /// Pooled precision at IOU 0.5 against the critical subset.
    pub precision_critical: Option<f64>,
    /// Pooled precision at IOU 0.5 against all annotations.
    pub precision_full: Option<f64>,
    /// Pooled precision at IOU 0.5 against the annotations left out of the
    /// critical subset; `None` when nothing is left out.
    pub precision_complement: Option<f64>,
    pub critical: Metrics,
    pub full: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub first: String,
    pub second: String,
    /// Sign of `P(first) - P(second)` on the critical subset (-1, 0, 1).
    pub order_critical: i8,
    /// Same on the full annotation set.
    pub order_full: i8,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentReport {
    pub threshold: f64,
    pub detectors: Vec<DetectorSummary>,
    /// Detector names by descending critical-subset precision.
    pub ranking_critical: Vec<String>,
    /// Detector names by descending full-set precision.
    pub ranking_full: Vec<String>,
    pub pairs: Vec<PairComparison>,
    pub flipped: bool,
}

fn sign(a: f64, b: f64) -> i8 {
    match a.total_cmp(&b) {
        Ordering::Less => -1,
        Ordering::Equal => 0,
        Ordering::Greater => 1,
    }
}

fn ranking(detectors: &[DetectorSummary], key: impl Fn(&DetectorSummary) -> f64) -> Vec<String> {
    let mut order: Vec<&DetectorSummary> = detectors.iter().collect();
    order.sort_by(|a, b| key(b).total_cmp(&key(a)));
    order.into_iter().map(|d| d.name.clone()).collect()
}

/// Compares detector rankings on the critical subset at `threshold` against
/// rankings on every annotation. A pair is flipped when the two orderings
/// disagree, ties included.
///
/// A detector without detections ranks with precision 0.
pub fn misalignment_check(
    detectors: &[(String, DetectionSet)],
    ds: &Dataset,
    records: &ImportanceSet,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<MisalignmentReport> {
    if detectors.len() < 2 {
        return Err(Error::Contract(format!(
            "at least two detectors are needed, got {}",
            detectors.len()
        )));
    }
    let mut summaries = Vec::with_capacity(detectors.len());
    for (name, dets) in detectors {
        let critical = evaluate_subset(dets, ds, records, Subset::Critical(threshold), cfg)?;
        let full = evaluate(dets, ds, cfg)?;
        let complement =
            match evaluate_subset(dets, ds, records, Subset::Complement(threshold), cfg) {
                Ok(r) => r.totals.precision_50,
                Err(Error::NoCategories | Error::NoEvaluableImages) => None,
                Err(e) => return Err(e),
            };
        summaries.push(DetectorSummary {
            name: name.clone(),
            precision_critical: critical.totals.precision_50,
            precision_full: full.totals.precision_50,
            precision_complement: complement,
            critical: critical.metrics,
            full: full.metrics,
        });
    }

    let p_crit = |d: &DetectorSummary| d.precision_critical.unwrap_or(0.0);
    let p_full = |d: &DetectorSummary| d.precision_full.unwrap_or(0.0);
    let mut pairs = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let (a, b) = (&summaries[i], &summaries[j]);
            let order_critical = sign(p_crit(a), p_crit(b));
            let order_full = sign(p_full(a), p_full(b));
            pairs.push(PairComparison {
                first: a.name.clone(),
                second: b.name.clone(),
                order_critical,
                order_full,
                flipped: order_critical != order_full,
            });
        }
    }
    Ok(MisalignmentReport {
        threshold,
        ranking_critical: ranking(&summaries, p_crit),
        ranking_full: ranking(&summaries, p_full),
        flipped: pairs.iter().any(|p| p.flipped),
        detectors: summaries,
        pairs,
    })
}

impl MisalignmentReport {
    /// Console rendering: per-detector precisions and pairwise orderings.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .detectors
            .iter()
            .map(|d| d.name.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let _ = writeln!(
            out,
            "{:<width$} {:>10} {:>10} {:>10}",
            "detector", "P(crit)", "P(all)", "P(compl)"
        );
        for d in &self.detectors {
            let _ = writeln!(
                out,
                "{:<width$} {:>10} {:>10} {:>10}",
                d.name,
                fmt_metric(d.precision_critical),
                fmt_metric(d.precision_full),
                fmt_metric(d.precision_complement)
            );
        }
        let sym = |s: i8| match s {
            1 => ">",
            -1 => "<",
            _ => "=",
        };
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{} vs {}: critical {} all {}{}",
                p.first,
                p.second,
                sym(p.order_critical),
                sym(p.order_full),
                if p.flipped { "  FLIP" } else { "" }
            );
        }
        out
    }
}

/// Splits all scored annotations into `q` groups of (nearly) equal size by
/// ascending propagated importance. When the count does not divide evenly the
/// lowest groups get one extra member. Ties are ordered by annotation id.
pub fn quantile_partition(records: &ImportanceSet, q: usize) -> Result<Vec<Vec<AnnotationId>>> {
    if q < 2 {
        return Err(Error::Contract(format!("need at least 2 groups, got {q}")));
    }
    let mut pooled: Vec<(f64, AnnotationId)> = records
        .iter()
        .filter(|r| !r.is_skipped())
        .flat_map(|r| r.scores.iter().map(|s| (s.i_p, s.annotation_id)))
        .collect();
    if pooled.len() < q {
        return Err(Error::Contract(format!(
            "cannot split {} annotations into {q} groups",
            pooled.len()
        )));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (base, extra) = (pooled.len() / q, pooled.len() % q);
    let mut groups = Vec::with_capacity(q);
    let mut rest = pooled.as_slice();
    for g in 0..q {
        let size = base + usize::from(g < extra);
        let (head, tail) = rest.split_at(size);
        groups.push(head.iter().map(|&(_, id)| id).collect());
        rest = tail;
    }
    Ok(groups)
}

/// A scored dataset taking part in the consistency study.
#[derive(Debug, Clone, Copy)]
pub struct ScoredDataset<'a> {
    pub dataset: &'a Dataset,
    pub records: &'a ImportanceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub threshold: f64,
    /// Mean region Jaccard over images where both selections are non-empty.
    pub mean_iou: Option<f64>,
    /// Fraction of the second dataset's annotations on shared images that the
    /// selection removes.
    pub removal_fraction: f64,
    pub images_used: usize,
    pub images_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCurve {
    pub fixed_threshold: f64,
    pub shared_images: usize,
    pub rows: Vec<ConsistencyRow>,
}

fn selected_boxes(ds: &Dataset, records: &ImportanceSet, image: ImageId, t: f64) -> Vec<BBox> {
    let Some(rec) = records.get(image) else {
        return Vec::new();
    };
    let sel = select(rec, t);
    ds.image_annotations(image)
        .filter(|a| sel.ids.contains(&a.id))
        .map(|a| a.bbox)
        .collect()
}

/// Region Jaccard between the first dataset's selection at a fixed threshold
/// and the second dataset's selection at each swept threshold.
pub fn consistency_curve(
    a: ScoredDataset<'_>,
    b: ScoredDataset<'_>,
    fixed_threshold: f64,
    sweep: &[f64],
) -> Result<ConsistencyCurve> {
    crate::importance::validate_threshold(fixed_threshold)?;
    for &t in sweep {
        crate::importance::validate_threshold(t)?;
    }
    let ids_a: BTreeSet<ImageId> = a.dataset.image_ids().collect();
    let shared: Vec<ImageId> = b
        .dataset
        .image_ids()
        .filter(|id| ids_a.contains(id))
        .collect();
    if shared.is_empty() {
        return Err(Error::Contract(
            "the two datasets share no image ids".into(),
        ));
    }

    let fixed: Vec<Vec<BBox>> = shared
        .iter()
        .map(|&id| selected_boxes(a.dataset, a.records, id, fixed_threshold))
        .collect();
    let total_b: usize = shared
        .iter()
        .map(|&id| b.dataset.image_annotations(id).count())
        .sum();

    let rows = sweep
        .iter()
        .map(|&t| {
            let mut sum = 0.0;
            let mut used = 0;
            let mut kept = 0;
            for (i, &id) in shared.iter().enumerate() {
                let sel = selected_boxes(b.dataset, b.records, id, t);
                kept += sel.len();
                if fixed[i].is_empty() || sel.is_empty() {
                    continue;
                }
                if let Some(j) = region_jaccard(&fixed[i], &sel) {
                    sum += j;
                    used += 1;
                }
            }
            ConsistencyRow {
                threshold: t,
                mean_iou: (used > 0).then(|| sum / used as f64),
                removal_fraction: if total_b == 0 {
                    0.0
                } else {
                    (total_b - kept) as f64 / total_b as f64
                },
                images_used: used,
                images_excluded: shared.len() - used,
            }
        })
        .collect();
    Ok(ConsistencyCurve {
        fixed_threshold,
        shared_images: shared.len(),
        rows,
    })
}

impl ConsistencyCurve {
    pub const CSV_HEADER: &'static str = "threshold,mean_iou,removal_fraction,images_used";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let iou = r
                .mean_iou
                .map_or_else(|| "NaN".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.threshold, iou, r.removal_fraction, r.images_used
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Threshold with the highest mean IOU (first one on ties).
    pub fn best_threshold(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for r in &self.rows {
            if let Some(v) = r.mean_iou {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((r.threshold, v));
                }
            }
        }
        best.map(|(t, _)| t)
    }

    /// Threshold where the curve bends down the most: the most negative
    /// second difference of mean IOU.
    pub fn inflection_threshold(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for w in self.rows.windows(3) {
            let (Some(p), Some(c), Some(n)) = (w[0].mean_iou, w[1].mean_iou, w[2].mean_iou) else {
                continue;
            };
            let d2 = n - 2.0 * c + p;
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((w[1].threshold, d2));
            }
        }
        best.map(|(t, _)| t)
    }
}
