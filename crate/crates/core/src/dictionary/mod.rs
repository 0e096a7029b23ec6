//! Visual-word dictionaries: per-class k-means centroids of pixel embeddings.

mod kmeans;

pub use kmeans::{kmeans, kmeans_objective, Clustering, KMeansConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EmbeddingMap;
use crate::frame::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DictionaryError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("foreground class {0} has no pixels")]
    EmptyClass(u8),
    #[error("label {label} exceeds the declared class count {num_classes}")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, DictionaryError>;

/// How a class's support pixels become words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// k-means centroids (k = 1 is the single-prototype limit).
    #[default]
    Clusters,
    /// One word per support pixel (the nearest-neighbour limit).
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub k_foreground: usize,
    /// Background receives `k_foreground * background_multiplier` words.
    pub background_multiplier: usize,
    pub seed: u64,
    /// Cluster L2-normalised embeddings instead of raw ones.
    pub normalize_embeddings: bool,
    pub representation: Representation,
    pub kmeans: KMeansConfig,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            k_foreground: 8,
            background_multiplier: 4,
            seed: 0,
            normalize_embeddings: false,
            representation: Representation::Clusters,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl DictionaryConfig {
    pub fn words_for_class(&self, class: u8) -> usize {
        if class == 0 {
            self.k_foreground * self.background_multiplier
        } else {
            self.k_foreground
        }
    }

    /// Per-class clustering seed; independent of the order classes are visited.
    pub fn class_seed(&self, class: u8) -> u64 {
        self.seed ^ class as u64
    }
}

/// When a word entered the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Birth {
    pub frame: usize,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualWord {
    pub centroid: Vec<f32>,
    pub class_id: u8,
    pub member_count: usize,
    pub birth: Birth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub words: Vec<VisualWord>,
    pub dim: usize,
    /// Number of foreground classes `C`; valid class ids are `0..=C`.
    pub num_classes: usize,
    pub config: DictionaryConfig,
}

impl Dictionary {
    pub fn new(dim: usize, num_classes: usize, config: DictionaryConfig) -> Self {
        Self {
            words: Vec::new(),
            dim,
            num_classes,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes + 1
    }

    /// `[num_words, dim]` centroid matrix.
    pub fn word_matrix(&self) -> Tensor {
        let data = self.words.iter().flat_map(|w| w.centroid.iter().copied()).collect();
        Tensor::new(vec![self.words.len(), self.dim], data).expect("centroid dims")
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.words.iter().map(|w| w.class_id as usize).collect()
    }

    pub fn word_count(&self, class: u8) -> usize {
        self.words.iter().filter(|w| w.class_id == class).count()
    }

    pub fn words_of(&self, class: u8) -> impl Iterator<Item = (usize, &VisualWord)> {
        self.words.iter().enumerate().filter(move |(_, w)| w.class_id == class)
    }
}

/// Pixel indices belonging to each class of `mask`, validated against `num_classes`.
pub fn pixels_by_class(mask: &LabelMap, num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes + 1];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l as usize > num_classes {
            return Err(DictionaryError::LabelOutOfRange { label: l, num_classes });
        }
        by_class[l as usize].push(i);
    }
    Ok(by_class)
}

pub(crate) fn gather_rows(emb: &EmbeddingMap, pixels: &[usize], normalize: bool) -> Vec<f32> {
    let mut out = Vec::with_capacity(pixels.len() * emb.dim());
    for &p in pixels {
        let row = emb.pixel(p);
        if normalize {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            out.extend(row.iter().map(|v| v / n));
        } else {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Clusters one class's pixels. Returns `(centroid, member pixel indices)` per word.
pub(crate) fn class_words(
    emb: &EmbeddingMap,
    pixels: &[usize],
    k: usize,
    seed: u64,
    config: &DictionaryConfig,
) -> Result<Vec<(Vec<f32>, Vec<usize>)>> {
    let points = gather_rows(emb, pixels, config.normalize_embeddings);
    let dim = emb.dim();
    match config.representation {
        Representation::PerPixel => Ok(points
            .chunks(dim)
            .zip(pixels)
            .map(|(row, &p)| (row.to_vec(), vec![p]))
            .collect()),
        Representation::Clusters => {
            let c = kmeans(&points, dim, k, seed, &config.kmeans)?;
            Ok((0..c.k())
                .map(|j| {
                    let members = c.members(j).into_iter().map(|i| pixels[i]).collect();
                    (c.centroids[j].clone(), members)
                })
                .collect())
        }
    }
}

/// Builds words for every class present in `mask`. Also returns, per word,
/// the pixel indices that formed it (used to differentiate through centroids).
pub fn build_dictionary_with_members(
    emb: &EmbeddingMap,
    mask: &LabelMap,
    num_classes: usize,
    config: &DictionaryConfig,
) -> Result<(Dictionary, Vec<Vec<usize>>)> {
    if mask.width != emb.width() || mask.height != emb.height() {
        return Err(DictionaryError::ShapeMismatch(format!(
            "mask {}x{} vs embeddings {}x{}",
            mask.width,
            mask.height,
            emb.width(),
            emb.height()
        )));
    }
    let by_class = pixels_by_class(mask, num_classes)?;
    if let Some(c) = (1..=num_classes).find(|&c| by_class[c].is_empty()) {
        return Err(DictionaryError::EmptyClass(c as u8));
    }
    let mut dict = Dictionary::new(emb.dim(), num_classes, *config);
    let mut members = Vec::new();
    for (class, pixels) in by_class.iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        let class = class as u8;
        let words = class_words(
            emb,
            pixels,
            config.words_for_class(class),
            config.class_seed(class),
            config,
        )?;
        for (centroid, m) in words {
            dict.words.push(VisualWord {
                centroid,
                class_id: class,
                member_count: m.len(),
                birth: Birth::default(),
            });
            members.push(m);
        }
    }
    Ok((dict, members))
}

pub fn build_dictionary(
    emb: &EmbeddingMap,
    mask: &LabelMap,
    num_classes: usize,
    config: &DictionaryConfig,
) -> Result<Dictionary> {
    build_dictionary_with_members(emb, mask, num_classes, config).map(|(d, _)| d)
}
