//! In-memory datasets and the COCO-style JSON readers and writers.
//!
//! Three wire formats are read: annotation files (`images`, `annotations`,
//! `categories`), caption files (`annotations` with `image_id` and `caption`),
//! and detection results (a bare array of `{image_id, category_id, bbox, score}`).
//! Boxes are always `[x, y, width, height]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type ImageId = u64;
pub type AnnotationId = u64;
pub type CategoryId = u64;

/// How loaders treat recoverable record problems (degenerate boxes, unknown
/// detection categories).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Turn skip-with-warning cases into hard errors.
    pub strict: bool,
}

impl LoadOptions {
    pub fn strict() -> Self {
        LoadOptions { strict: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Category vocabulary. Ids are unique and names are unique after lowercasing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    categories: Vec<Category>,
    by_id: HashMap<CategoryId, usize>,
    by_name: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(categories: impl IntoIterator<Item = Category>) -> Result<Self> {
        let mut cats: Vec<Category> = categories
            .into_iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.trim().to_lowercase(),
            })
            .collect();
        cats.sort_by_key(|c| c.id);
        let mut by_id = HashMap::with_capacity(cats.len());
        let mut by_name = HashMap::with_capacity(cats.len());
        for (i, c) in cats.iter().enumerate() {
            if by_id.insert(c.id, i).is_some() {
                return Err(Error::validation(
                    "categories",
                    format!("duplicate category id {}", c.id),
                ));
            }
            if by_name.insert(c.name.clone(), i).is_some() {
                return Err(Error::validation(
                    "categories",
                    format!("duplicate category name {:?}", c.name),
                ));
            }
        }
        Ok(Vocabulary {
            categories: cats,
            by_id,
            by_name,
        })
    }

    /// Categories in ascending id order.
    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.by_id.get(&id).map(|&i| &self.categories[i])
    }

    /// Case-insensitive name lookup.
    pub fn id_of(&self, name: &str) -> Option<CategoryId> {
        self.by_name
            .get(&name.trim().to_lowercase())
            .map(|&i| self.categories[i].id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    /// Tokens supplied by an external tagger; used instead of the built-in
    /// normalizer when present.
    pub tokens: Option<Vec<String>>,
}

impl Caption {
    pub fn new(text: impl Into<String>) -> Self {
        Caption {
            text: text.into(),
            tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSet {
    pub image_id: ImageId,
    pub captions: Vec<Caption>,
}

impl CaptionSet {
    pub fn from_texts<S: Into<String>>(
        image_id: ImageId,
        texts: impl IntoIterator<Item = S>,
    ) -> Self {
        CaptionSet {
            image_id,
            captions: texts.into_iter().map(Caption::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

pub type CaptionIndex = BTreeMap<ImageId, CaptionSet>;

/// Untyped sections carried through from the source file so filtered output
/// keeps them verbatim.
#[derive(Debug, Clone, Default)]
struct Passthrough {
    top_level: Map<String, Value>,
    images: Vec<Value>,
    categories: Vec<Value>,
    annotations: HashMap<AnnotationId, Value>,
}

/// Ground-truth annotations for a set of images.
///
/// Equality compares the vocabulary, images and annotations; pass-through
/// JSON is ignored.
#[derive(Debug, Clone)]
pub struct Dataset {
    vocab: Vocabulary,
    images: Vec<ImageInfo>,
    annotations: Vec<Annotation>,
    by_image: BTreeMap<ImageId, Vec<usize>>,
    by_id: HashMap<AnnotationId, usize>,
    skipped: usize,
    raw: Passthrough,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.images == other.images
            && self.annotations == other.annotations
    }
}

impl Dataset {
    /// Builds a dataset from typed parts, checking referential integrity.
    pub fn new(
        vocab: Vocabulary,
        images: Vec<ImageInfo>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        Self::assemble(vocab, images, annotations, 0, Passthrough::default())
    }

    fn assemble(
        vocab: Vocabulary,
        images: Vec<ImageInfo>,
        annotations: Vec<Annotation>,
        skipped: usize,
        raw: Passthrough,
    ) -> Result<Self> {
        let mut by_image: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
        for img in &images {
            if by_image.insert(img.id, Vec::new()).is_some() {
                return Err(Error::validation(
                    "images",
                    format!("duplicate image id {}", img.id),
                ));
            }
        }

        let mut by_id = HashMap::with_capacity(annotations.len());
        let mut unknown_images = Vec::new();
        let mut unknown_categories = Vec::new();
        for (i, ann) in annotations.iter().enumerate() {
            if by_id.insert(ann.id, i).is_some() {
                return Err(Error::validation(
                    "annotations",
                    format!("duplicate annotation id {}", ann.id),
                ));
            }
            match by_image.get_mut(&ann.image_id) {
                Some(list) => list.push(i),
                None => unknown_images.push((ann.id, ann.image_id)),
            }
            if !vocab.contains(ann.category_id) {
                unknown_categories.push((ann.id, ann.category_id));
            }
        }
        if !unknown_images.is_empty() {
            return Err(Error::validation(
                "annotations",
                format!(
                    "{} annotation(s) reference unknown images: {}",
                    unknown_images.len(),
                    format_pairs(&unknown_images, "image")
                ),
            ));
        }
        if !unknown_categories.is_empty() {
            return Err(Error::validation(
                "annotations",
                format!(
                    "{} annotation(s) reference unknown categories: {}",
                    unknown_categories.len(),
                    format_pairs(&unknown_categories, "category")
                ),
            ));
        }
        for list in by_image.values_mut() {
            list.sort_by_key(|&i| annotations[i].id);
        }

        Ok(Dataset {
            vocab,
            images,
            annotations,
            by_image,
            by_id,
            skipped,
            raw,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    /// Image ids in ascending order.
    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.by_image.keys().copied()
    }

    pub fn has_image(&self, id: ImageId) -> bool {
        self.by_image.contains_key(&id)
    }

    /// All annotations in source order.
    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    /// Annotations of one image, in ascending annotation id order.
    pub fn image_annotations(&self, image_id: ImageId) -> impl Iterator<Item = &Annotation> + '_ {
        self.by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.annotations[i])
    }

    pub fn annotation(&self, id: AnnotationId) -> Option<&Annotation> {
        self.by_id.get(&id).map(|&i| &self.annotations[i])
    }

    /// Number of annotations dropped at load time (degenerate boxes).
    pub fn skipped_annotations(&self) -> usize {
        self.skipped
    }

    /// Same dataset with only the annotations in `keep`. Images and
    /// categories are unchanged.
    pub fn restricted(&self, keep: &BTreeSet<AnnotationId>) -> Result<Self> {
        self.check_ids(keep)?;
        let annotations: Vec<Annotation> = self
            .annotations
            .iter()
            .filter(|a| keep.contains(&a.id))
            .copied()
            .collect();
        let mut raw = self.raw.clone();
        raw.annotations.retain(|id, _| keep.contains(id));
        Self::assemble(
            self.vocab.clone(),
            self.images.clone(),
            annotations,
            self.skipped,
            raw,
        )
    }

    fn check_ids(&self, keep: &BTreeSet<AnnotationId>) -> Result<()> {
        let foreign: Vec<String> = keep
            .iter()
            .filter(|id| !self.by_id.contains_key(id))
            .map(|id| id.to_string())
            .collect();
        if foreign.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "annotation ids not in dataset: {}",
                foreign.join(", ")
            )))
        }
    }
}

fn format_pairs(pairs: &[(u64, u64)], what: &str) -> String {
    const SHOWN: usize = 20;
    let mut s: Vec<String> = pairs
        .iter()
        .take(SHOWN)
        .map(|(a, b)| format!("annotation {a} -> {what} {b}"))
        .collect();
    if pairs.len() > SHOWN {
        s.push(format!("... ({} more)", pairs.len() - SHOWN));
    }
    s.join(", ")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, e.to_string()))
}

fn field<T: DeserializeOwned>(path: &Path, what: &str, index: usize, value: Value) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| Error::parse(path, format!("{what} record #{index}: {e}")))
}

#[derive(Deserialize)]
struct AnnotationFile {
    images: Vec<Value>,
    annotations: Vec<Value>,
    categories: Vec<Value>,
    #[serde(flatten)]
    rest: Map<String, Value>,
}

#[derive(Deserialize)]
struct ImageRecord {
    id: ImageId,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

#[derive(Deserialize)]
struct AnnotationRecord {
    id: AnnotationId,
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
}

/// Reads a COCO annotation file.
///
/// Degenerate boxes are skipped with a warning (an error under
/// [`LoadOptions::strict`]); the count is available from
/// [`Dataset::skipped_annotations`].
pub fn load_annotations(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file: AnnotationFile = read_json(path)?;

    let mut categories = Vec::with_capacity(file.categories.len());
    for (i, v) in file.categories.iter().enumerate() {
        categories.push(field::<Category>(path, "category", i, v.clone())?);
    }
    let vocab = Vocabulary::new(categories).map_err(|e| Error::parse(path, e.to_string()))?;

    let mut images = Vec::with_capacity(file.images.len());
    for (i, v) in file.images.iter().enumerate() {
        let r: ImageRecord = field(path, "image", i, v.clone())?;
        images.push(ImageInfo {
            id: r.id,
            width: r.width,
            height: r.height,
        });
    }

    let mut annotations = Vec::with_capacity(file.annotations.len());
    let mut raw_anns = HashMap::with_capacity(file.annotations.len());
    let mut skipped = 0usize;
    for (i, v) in file.annotations.into_iter().enumerate() {
        let r: AnnotationRecord = field(path, "annotation", i, v.clone())?;
        match BBox::try_from(r.bbox) {
            Ok(bbox) => {
                annotations.push(Annotation {
                    id: r.id,
                    image_id: r.image_id,
                    category_id: r.category_id,
                    bbox,
                });
                raw_anns.insert(r.id, v);
            }
            Err(e) if opts.strict => {
                return Err(Error::validation(
                    format!("{}: annotation {}", path.display(), r.id),
                    e.to_string(),
                ));
            }
            Err(e) => {
                warn!("{}: skipping annotation {}: {e}", path.display(), r.id);
                skipped += 1;
            }
        }
    }

    let raw = Passthrough {
        top_level: file.rest,
        images: file.images,
        categories: file.categories,
        annotations: raw_anns,
    };
    Dataset::assemble(vocab, images, annotations, skipped, raw).map_err(|e| match e {
        Error::Validation { context, message } => Error::Validation {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}

#[derive(Deserialize)]
struct CaptionFile {
    annotations: Vec<Value>,
}

#[derive(Deserialize)]
struct CaptionRecord {
    image_id: ImageId,
    caption: String,
    #[serde(default)]
    tokens: Option<Vec<String>>,
}

/// Reads a COCO captions file and groups captions by image. Caption text is
/// kept verbatim.
pub fn load_captions(path: impl AsRef<Path>) -> Result<CaptionIndex> {
    let path = path.as_ref();
    let file: CaptionFile = read_json(path)?;
    let mut out: CaptionIndex = BTreeMap::new();
    for (i, v) in file.annotations.into_iter().enumerate() {
        let r: CaptionRecord = field(path, "caption", i, v)?;
        out.entry(r.image_id)
            .or_insert_with(|| CaptionSet {
                image_id: r.image_id,
                captions: Vec::new(),
            })
            .captions
            .push(Caption {
                text: r.caption,
                tokens: r.tokens,
            });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct DetectionRecord {
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    score: f64,
}

/// Detector output grouped by image. Within each image detections are sorted
/// by descending score; equal scores keep file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    by_image: BTreeMap<ImageId, Vec<Detection>>,
    /// Records dropped because their category is not in the vocabulary.
    pub skipped_unknown_category: usize,
    /// Records dropped because their box is degenerate.
    pub skipped_degenerate: usize,
    /// Records seen in the source, including skipped ones.
    pub total_records: usize,
}

impl DetectionSet {
    pub fn from_detections(dets: impl IntoIterator<Item = Detection>) -> Self {
        let mut by_image: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
        let mut total = 0;
        for d in dets {
            total += 1;
            by_image.entry(d.image_id).or_default().push(d);
        }
        for list in by_image.values_mut() {
            sort_by_score(list);
        }
        DetectionSet {
            by_image,
            total_records: total,
            ..Default::default()
        }
    }

    pub fn image(&self, image_id: ImageId) -> &[Detection] {
        self.by_image
            .get(&image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &[Detection])> + '_ {
        self.by_image.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.values().all(Vec::is_empty)
    }

    /// Keeps only the `k` highest-scoring detections of each image.
    pub fn capped_per_image(&self, k: usize) -> Self {
        let mut out = self.clone();
        for list in out.by_image.values_mut() {
            list.truncate(k);
        }
        out
    }
}

fn sort_by_score(list: &mut [Detection]) {
    // stable: ties keep input order
    list.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Reads a COCO detection-results file.
pub fn load_detections(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    opts: LoadOptions,
) -> Result<DetectionSet> {
    let path = path.as_ref();
    let records: Vec<Value> = read_json(path)?;
    let total = records.len();
    let mut dets = Vec::with_capacity(total);
    let mut unknown = 0;
    let mut degenerate = 0;
    for (i, v) in records.into_iter().enumerate() {
        let r: DetectionRecord = field(path, "detection", i, v)?;
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            return Err(Error::validation(
                format!("{}: detection record #{i}", path.display()),
                format!("score {} outside [0, 1]", r.score),
            ));
        }
        if !vocab.contains(r.category_id) {
            if opts.strict {
                return Err(Error::validation(
                    format!("{}: detection record #{i}", path.display()),
                    format!("unknown category id {}", r.category_id),
                ));
            }
            unknown += 1;
            continue;
        }
        let bbox = match BBox::try_from(r.bbox) {
            Ok(b) => b,
            Err(e) if opts.strict => {
                return Err(Error::validation(
                    format!("{}: detection record #{i}", path.display()),
                    e.to_string(),
                ));
            }
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        dets.push(Detection {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox,
            score: r.score,
        });
    }
    if unknown > 0 {
        warn!(
            "{}: skipped {unknown} detection(s) with unknown category ids",
            path.display()
        );
    }
    if degenerate > 0 {
        warn!(
            "{}: skipped {degenerate} detection(s) with degenerate boxes",
            path.display()
        );
    }
    let mut set = DetectionSet::from_detections(dets);
    set.skipped_unknown_category = unknown;
    set.skipped_degenerate = degenerate;
    set.total_records = total;
    Ok(set)
}

/// Writes `ds` restricted to `keep` in the source schema. Images, categories
/// and other top-level sections are written unchanged.
pub fn write_filtered_annotations(
    ds: &Dataset,
    keep: &BTreeSet<AnnotationId>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    ds.check_ids(keep)?;

    let annotations: Vec<Value> = ds
        .annotations
        .iter()
        .filter(|a| keep.contains(&a.id))
        .map(|a| {
            ds.raw
                .annotations
                .get(&a.id)
                .cloned()
                .unwrap_or_else(|| annotation_json(a))
        })
        .collect();
    let images = if ds.raw.images.is_empty() {
        ds.images
            .iter()
            .map(|i| serde_json::to_value(i).expect("image info serializes"))
            .collect()
    } else {
        ds.raw.images.clone()
    };
    let categories = if ds.raw.categories.is_empty() {
        ds.vocab
            .categories()
            .iter()
            .map(|c| serde_json::to_value(c).expect("category serializes"))
            .collect()
    } else {
        ds.raw.categories.clone()
    };

    let mut doc = ds.raw.top_level.clone();
    doc.insert("images".into(), Value::Array(images));
    doc.insert("annotations".into(), Value::Array(annotations));
    doc.insert("categories".into(), Value::Array(categories));
    write_json(path, &Value::Object(doc))
}

fn annotation_json(a: &Annotation) -> Value {
    serde_json::json!({
        "id": a.id,
        "image_id": a.image_id,
        "category_id": a.category_id,
        "bbox": a.bbox,
        "area": a.bbox.area(),
        "iscrowd": 0,
    })
}

/// Writes `value` as compact JSON followed by a newline.
pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `value` as indented JSON followed by a newline.
pub(crate) fn write_json_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::parse(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}
