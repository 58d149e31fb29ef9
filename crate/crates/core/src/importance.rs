//! Per-annotation importance.
//!
//! Category typicality is split across the annotations of each category in
//! proportion to box area, then diffused to spatially close annotations with
//! a graph heat kernel. The diffused scores are normalized to sum to one and
//! thresholded to pick the annotation subset used for evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_json_file, write_json, Annotation, AnnotationId, CaptionIndex, Dataset, ImageId,
};
use crate::error::{Error, Result};
use crate::geometry::min_distance;
use crate::semantics::{typicality, ConceptMap, TypicalityScores};

/// Default diffusion time.
pub const DEFAULT_HEAT_TIME: f64 = 1.0;

/// Threshold and diffusion time for annotation selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub heat_time: f64,
}

impl SelectionConfig {
    pub fn new(threshold: f64, heat_time: f64) -> Result<Self> {
        validate_threshold(threshold)?;
        validate_heat_time(heat_time)?;
        Ok(SelectionConfig {
            threshold,
            heat_time,
        })
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            threshold: 0.0,
            heat_time: DEFAULT_HEAT_TIME,
        }
    }
}

pub fn validate_threshold(t: f64) -> Result<()> {
    if (0.0..1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "importance threshold must lie in [0, 1), got {t}"
        )))
    }
}

pub fn validate_heat_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "heat time must be finite and non-negative, got {t}"
        )))
    }
}

/// Splits each category's typicality over that category's annotations in
/// proportion to box area. Annotations of unmentioned categories get 0.
pub fn distribute(ts: &TypicalityScores, anns: &[Annotation]) -> Vec<f64> {
    let mut area_sum: HashMap<u64, f64> = HashMap::new();
    for a in anns {
        *area_sum.entry(a.category_id).or_default() += a.bbox.area();
    }
    anns.iter()
        .map(|a| {
            let ic = ts.get(a.category_id);
            if ic > 0.0 {
                a.bbox.area() * ic / area_sum[&a.category_id]
            } else {
                0.0
            }
        })
        .collect()
}

/// Dense symmetric weight matrix of an [`ObjectGraph`].
pub type WeightMatrix = DMatrix<f64>;

/// Proximity graph over the annotations of one image.
///
/// Edge weights are `1 / max(d, 1)` where `d` is the minimum distance between
/// boxes in pixels, so every off-diagonal weight lies in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGraph {
    weights: DMatrix<f64>,
}

impl ObjectGraph {
    /// Wraps an explicit adjacency matrix. It must be square, symmetric,
    /// finite and non-negative with a zero diagonal.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n {
            return Err(Error::Contract(format!(
                "adjacency must be square, got {}x{}",
                n,
                weights.ncols()
            )));
        }
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(Error::Contract(format!(
                    "adjacency diagonal entry {i} is not zero"
                )));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Contract(format!(
                        "adjacency entry ({i}, {j}) = {w} is not a finite non-negative weight"
                    )));
                }
                if w != weights[(j, i)] {
                    return Err(Error::Contract(format!(
                        "adjacency is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(ObjectGraph { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Combinatorial Laplacian `D - W`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut l = -self.weights.clone();
        for i in 0..n {
            l[(i, i)] = self.weights.row(i).sum();
        }
        l
    }
}

pub fn build_graph(anns: &[Annotation]) -> ObjectGraph {
    let n = anns.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = min_distance(&anns[i].bbox, &anns[j].bbox);
            let v = 1.0 / d.max(1.0);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    ObjectGraph { weights: w }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatKernel {
    pub t: f64,
    matrix: DMatrix<f64>,
}

impl HeatKernel {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Heat kernel `U exp(-t Λ/λmax) Uᵀ` of the graph's combinatorial Laplacian,
/// with eigenvalues scaled into `[0, 1]` by the largest one.
pub fn heat_kernel(g: &ObjectGraph, t: f64) -> Result<HeatKernel> {
    validate_heat_time(t)?;
    let n = g.len();
    if n <= 1 {
        return Ok(HeatKernel {
            t,
            matrix: DMatrix::identity(n, n),
        });
    }
    let eig = SymmetricEigen::try_new(g.laplacian(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite eigenvalue".into()));
    }
    let lambda_max = eig.eigenvalues.max();
    let filter: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let scaled = if lambda_max > 0.0 {
                (l.max(0.0) / lambda_max).min(1.0)
            } else {
                0.0
            };
            (-t * scaled).exp()
        })
        .collect();

    let u = &eig.eigenvectors;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| u[(i, k)] * filter[k] * u[(j, k)]).sum();
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(HeatKernel { t, matrix: h })
}

/// Why an image has no importance scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    NoCategoryImportance,
    NoAnnotations,
}

impl SkipReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            SkipReason::NoCategoryImportance => "no-category-importance",
            SkipReason::NoAnnotations => "no-annotations",
        }
    }
}

/// Diffuses `io` through `hk` and normalizes the result to unit sum.
/// Negative round-off is clamped to zero first.
pub fn propagate(io: &[f64], hk: &HeatKernel) -> Result<Vec<f64>, SkipReason> {
    assert_eq!(
        io.len(),
        hk.len(),
        "importance vector and kernel sizes differ"
    );
    let n = io.len();
    let raw: Vec<f64> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| io[i] * hk.matrix[(i, j)])
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total.is_nan() || total <= 0.0 || total.is_infinite() {
        return Err(SkipReason::NoCategoryImportance);
    }
    Ok(raw.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub annotation_id: AnnotationId,
    pub i_o: f64,
    pub i_p: f64,
}

/// Importance of every annotation in one image, or the reason the image was
/// skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRecord {
    pub image_id: ImageId,
    /// Ascending annotation id; empty when skipped.
    pub scores: Vec<ImportanceScore>,
    pub skipped: Option<SkipReason>,
}

impl ImportanceRecord {
    pub fn skipped(image_id: ImageId, reason: SkipReason) -> Self {
        ImportanceRecord {
            image_id,
            scores: Vec::new(),
            skipped: Some(reason),
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.skipped.is_some()
    }
}

/// Annotations whose propagated importance strictly exceeds a threshold.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    pub ids: BTreeSet<AnnotationId>,
    pub skipped: bool,
}

pub fn select(rec: &ImportanceRecord, threshold: f64) -> Selection {
    if rec.is_skipped() {
        return Selection {
            ids: BTreeSet::new(),
            skipped: true,
        };
    }
    Selection {
        ids: rec
            .scores
            .iter()
            .filter(|s| s.i_p > threshold)
            .map(|s| s.annotation_id)
            .collect(),
        skipped: false,
    }
}

/// Scores the annotations of a single image.
pub fn score_annotations(
    image_id: ImageId,
    anns: &[Annotation],
    ts: Option<&TypicalityScores>,
    heat_time: f64,
) -> Result<ImportanceRecord> {
    if anns.is_empty() {
        return Ok(ImportanceRecord::skipped(
            image_id,
            SkipReason::NoAnnotations,
        ));
    }
    let ts = match ts {
        Some(ts) if !ts.is_empty() => ts,
        _ => {
            return Ok(ImportanceRecord::skipped(
                image_id,
                SkipReason::NoCategoryImportance,
            ))
        }
    };
    let io = distribute(ts, anns);
    if io.iter().sum::<f64>().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Ok(ImportanceRecord::skipped(
            image_id,
            SkipReason::NoCategoryImportance,
        ));
    }
    let hk = heat_kernel(&build_graph(anns), heat_time)?;
    match propagate(&io, &hk) {
        Ok(ip) => Ok(ImportanceRecord {
            image_id,
            scores: anns
                .iter()
                .zip(io.iter().zip(ip))
                .map(|(a, (&i_o, i_p))| ImportanceScore {
                    annotation_id: a.id,
                    i_o,
                    i_p,
                })
                .collect(),
            skipped: None,
        }),
        Err(reason) => Ok(ImportanceRecord::skipped(image_id, reason)),
    }
}

/// Runs typicality, distribution, graph construction and diffusion for one
/// image of `ds`.
pub fn score_image(
    ds: &Dataset,
    captions: &CaptionIndex,
    cmap: &ConceptMap,
    heat_time: f64,
    image_id: ImageId,
) -> Result<ImportanceRecord> {
    if !ds.has_image(image_id) {
        return Err(Error::Contract(format!(
            "image {image_id} is not in the dataset"
        )));
    }
    let anns: Vec<Annotation> = ds.image_annotations(image_id).copied().collect();
    let ts = captions
        .get(&image_id)
        .filter(|c| !c.is_empty())
        .map(|c| typicality(c, cmap));
    score_annotations(image_id, &anns, ts.as_ref(), heat_time)
}

/// Scores every image of `ds` in parallel on the current rayon pool. The
/// result is ordered by image id regardless of scheduling.
pub fn score_dataset(
    ds: &Dataset,
    captions: &CaptionIndex,
    cmap: &ConceptMap,
    heat_time: f64,
) -> Result<ImportanceSet> {
    validate_heat_time(heat_time)?;
    let ids: Vec<ImageId> = ds.image_ids().collect();
    let records = ids
        .par_iter()
        .map(|&id| score_image(ds, captions, cmap, heat_time, id))
        .collect::<Result<Vec<_>>>()?;
    ImportanceSet::new(records)
}

/// Importance records keyed by image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceSet {
    records: BTreeMap<ImageId, ImportanceRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    image_id: ImageId,
    skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<SkipReason>,
    #[serde(default)]
    scores: Vec<ImportanceScore>,
}

impl ImportanceSet {
    pub fn new(records: impl IntoIterator<Item = ImportanceRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for mut r in records {
            r.scores.sort_by_key(|s| s.annotation_id);
            let id = r.image_id;
            if map.insert(id, r).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate importance record for image {id}"
                )));
            }
        }
        Ok(ImportanceSet { records: map })
    }

    pub fn get(&self, image_id: ImageId) -> Option<&ImportanceRecord> {
        self.records.get(&image_id)
    }

    /// Records in ascending image id order.
    pub fn iter(&self) -> impl Iterator<Item = &ImportanceRecord> + '_ {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn skipped_count(&self) -> usize {
        self.iter().filter(|r| r.is_skipped()).count()
    }

    /// Selected annotation ids over all non-skipped records.
    pub fn select_all(&self, threshold: f64) -> BTreeSet<AnnotationId> {
        self.iter().flat_map(|r| select(r, threshold).ids).collect()
    }

    /// Checks that every record refers to images and annotations of `ds`,
    /// and that every image with annotations has a record.
    pub fn check_against(&self, ds: &Dataset) -> Result<()> {
        let mut problems = Vec::new();
        for r in self.iter() {
            if !ds.has_image(r.image_id) {
                problems.push(format!("record for unknown image {}", r.image_id));
                continue;
            }
            for s in &r.scores {
                match ds.annotation(s.annotation_id) {
                    Some(a) if a.image_id == r.image_id => {}
                    Some(a) => problems.push(format!(
                        "annotation {} belongs to image {}, not {}",
                        s.annotation_id, a.image_id, r.image_id
                    )),
                    None => problems.push(format!(
                        "unknown annotation {} in image {}",
                        s.annotation_id, r.image_id
                    )),
                }
            }
            if !r.is_skipped() {
                let expected = ds.image_annotations(r.image_id).count();
                if expected != r.scores.len() {
                    problems.push(format!(
                        "image {} has {} annotations but {} scores",
                        r.image_id,
                        expected,
                        r.scores.len()
                    ));
                }
            }
        }
        for id in ds.image_ids() {
            if self.get(id).is_none() && ds.image_annotations(id).next().is_some() {
                problems.push(format!("no importance record for image {id}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            let n = problems.len();
            problems.truncate(20);
            Err(Error::Contract(format!(
                "importance records do not match annotations ({n} problem(s)): {}",
                problems.join("; ")
            )))
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let wire: Vec<RecordWire> = self
            .iter()
            .map(|r| RecordWire {
                image_id: r.image_id,
                skipped: r.is_skipped(),
                reason: r.skipped,
                scores: r.scores.clone(),
            })
            .collect();
        write_json(path.as_ref(), &wire)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wire: Vec<RecordWire> = read_json_file(path)?;
        let mut records = Vec::with_capacity(wire.len());
        for (i, w) in wire.into_iter().enumerate() {
            let ctx = || format!("{}: record #{i} (image {})", path.display(), w.image_id);
            match (w.skipped, w.reason) {
                (true, None) => {
                    return Err(Error::validation(ctx(), "skipped record without a reason"))
                }
                (true, Some(_)) if !w.scores.is_empty() => {
                    return Err(Error::validation(ctx(), "skipped record carries scores"))
                }
                (false, Some(_)) => {
                    return Err(Error::validation(ctx(), "reason given for a scored record"))
                }
                _ => {}
            }
            if !w.skipped {
                if w.scores.iter().any(|s| {
                    !(s.i_o.is_finite() && s.i_o >= 0.0 && s.i_p.is_finite() && s.i_p >= 0.0)
                }) {
                    return Err(Error::validation(
                        ctx(),
                        "scores must be finite and non-negative",
                    ));
                }
                let total: f64 = w.scores.iter().map(|s| s.i_p).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(
                        ctx(),
                        format!("propagated scores sum to {total}, expected 1"),
                    ));
                }
            }
            records.push(ImportanceRecord {
                image_id: w.image_id,
                scores: w.scores,
                skipped: w.reason,
            });
        }
        ImportanceSet::new(records)
            .map_err(|e| Error::validation(path.display().to_string(), e.to_string()))
    }
}
