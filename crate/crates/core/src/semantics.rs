//! Caption-derived category importance.
//!
//! Captions are normalized into lemma tokens, object-denoting n-grams are
//! mapped to dataset categories through a [`ConceptMap`], and each category
//! is scored by the fraction of captions that mention it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::datamodel::{CaptionSet, CategoryId, ImageId, Vocabulary};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_NGRAM: usize = 3;

const IRREGULAR: &[(&str, &str)] = &[
    ("men", "man"),
    ("women", "woman"),
    ("people", "person"),
    ("children", "child"),
    ("mice", "mouse"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("geese", "goose"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("wolves", "wolf"),
    ("shelves", "shelf"),
    ("loaves", "loaf"),
    ("skis", "ski"),
    ("buses", "bus"),
];

/// Reduces a lowercase token to its lemma with a small suffix rule table.
fn lemmatize(token: &str) -> String {
    if let Some(&(_, lemma)) = IRREGULAR.iter().find(|(w, _)| *w == token) {
        return lemma.to_string();
    }
    let n = token.chars().count();
    if n < 4 {
        return token.to_string();
    }
    if n >= 5 {
        if let Some(stem) = token.strip_suffix("ies") {
            return format!("{stem}y");
        }
    }
    for suffix in ["sses", "ches", "shes", "xes", "zzes"] {
        if token.ends_with(suffix) {
            return token[..token.len() - 2].to_string();
        }
    }
    if ["ss", "us", "is"].iter().any(|s| token.ends_with(s)) {
        return token.to_string();
    }
    match token.strip_suffix('s') {
        Some(stem) => stem.to_string(),
        None => token.to_string(),
    }
}

/// Lowercases `text`, splits it on runs of non-alphabetic characters and
/// lemmatizes each token.
pub fn normalize_caption(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(lemmatize)
        .collect()
}

/// Lemma n-gram to category table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMap {
    entries: HashMap<String, CategoryId>,
    max_ngram: usize,
}

impl Default for ConceptMap {
    fn default() -> Self {
        ConceptMap::new(DEFAULT_MAX_NGRAM)
    }
}

impl ConceptMap {
    pub fn new(max_ngram: usize) -> Self {
        ConceptMap {
            entries: HashMap::new(),
            max_ngram: max_ngram.max(1),
        }
    }

    /// Identity mappings for every category name in `vocab`.
    pub fn from_vocabulary(vocab: &Vocabulary) -> Result<Self> {
        let longest = vocab
            .categories()
            .iter()
            .map(|c| normalize_caption(&c.name).len())
            .max()
            .unwrap_or(0);
        let mut map = ConceptMap::new(DEFAULT_MAX_NGRAM.max(longest));
        for c in vocab.categories() {
            if normalize_caption(&c.name).is_empty() {
                log::warn!("category {} ({:?}) has no alphabetic tokens", c.id, c.name);
                continue;
            }
            map.insert(&c.name, c.id)
                .map_err(|e| Error::validation("concept map", e))?;
        }
        Ok(map)
    }

    /// Identity mappings plus the synonyms listed in a TSV file.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let mut map = Self::from_vocabulary(vocab)?;
        map.add_synonyms(path, vocab)?;
        Ok(map)
    }

    /// Adds `lemma<TAB>category_name` lines from `path`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn add_synonyms(&mut self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::parse(path, format!("line {}: {msg}", lineno + 1));
            let (phrase, category) = line
                .split_once('\t')
                .ok_or_else(|| at("expected \"lemma<TAB>category_name\"".into()))?;
            let id = vocab
                .id_of(category)
                .ok_or_else(|| at(format!("unknown category {:?}", category.trim())))?;
            self.insert(phrase, id).map_err(at)?;
        }
        Ok(())
    }

    /// Maps `phrase` (normalized on insertion) to `category`.
    pub fn insert(&mut self, phrase: &str, category: CategoryId) -> Result<(), String> {
        let tokens = normalize_caption(phrase);
        if tokens.is_empty() {
            return Err(format!("phrase {phrase:?} has no alphabetic tokens"));
        }
        if tokens.len() > self.max_ngram {
            return Err(format!(
                "phrase {phrase:?} has {} tokens, more than the limit of {}",
                tokens.len(),
                self.max_ngram
            ));
        }
        let key = tokens.join(" ");
        match self.entries.get(&key) {
            Some(&existing) if existing != category => Err(format!(
                "{key:?} already maps to category {existing}, cannot remap to {category}"
            )),
            _ => {
                self.entries.insert(key, category);
                Ok(())
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<CategoryId> {
        self.entries.get(key).copied()
    }

    pub fn max_ngram(&self) -> usize {
        self.max_ngram
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Category ids targeted by at least one key.
    pub fn categories(&self) -> BTreeSet<CategoryId> {
        self.entries.values().copied().collect()
    }
}

/// Categories mentioned in `tokens`. Matching scans left to right, tries the
/// longest n-gram first, and never reuses a consumed token.
pub fn match_categories(tokens: &[String], cmap: &ConceptMap) -> BTreeSet<CategoryId> {
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = cmap.max_ngram.min(tokens.len() - i);
        let hit = (1..=longest)
            .rev()
            .find_map(|len| cmap.get(&tokens[i..i + len].join(" ")).map(|c| (c, len)));
        match hit {
            Some((cat, len)) => {
                found.insert(cat);
                i += len;
            }
            None => i += 1,
        }
    }
    found
}

/// Per-category document frequency over an image's captions.
#[derive(Debug, Clone, PartialEq)]
pub struct TypicalityScores {
    pub image_id: ImageId,
    /// Number of captions mentioning each category. Unmentioned categories are absent.
    pub document_frequency: BTreeMap<CategoryId, usize>,
    pub caption_count: usize,
}

impl TypicalityScores {
    /// Typicality of `category`, or 0 when it is never mentioned.
    pub fn get(&self, category: CategoryId) -> f64 {
        match self.document_frequency.get(&category) {
            Some(&df) if self.caption_count > 0 => df as f64 / self.caption_count as f64,
            _ => 0.0,
        }
    }

    /// `(category, typicality)` pairs in ascending category order.
    pub fn per_category(&self) -> impl Iterator<Item = (CategoryId, f64)> + '_ {
        self.document_frequency
            .keys()
            .map(move |&c| (c, self.get(c)))
    }

    pub fn is_empty(&self) -> bool {
        self.document_frequency.is_empty()
    }
}

fn caption_tokens(caption: &crate::datamodel::Caption) -> Vec<String> {
    match &caption.tokens {
        Some(tokens) => tokens.iter().flat_map(|t| normalize_caption(t)).collect(),
        None => normalize_caption(&caption.text),
    }
}

/// Scores each category by the fraction of captions in which it appears.
/// A caption counts at most once per category.
pub fn typicality(captions: &CaptionSet, cmap: &ConceptMap) -> TypicalityScores {
    let mut df: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for caption in &captions.captions {
        for cat in match_categories(&caption_tokens(caption), cmap) {
            *df.entry(cat).or_default() += 1;
        }
    }
    TypicalityScores {
        image_id: captions.image_id,
        document_frequency: df,
        caption_count: captions.len(),
    }
}
