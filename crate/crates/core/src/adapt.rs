//! Online dictionary adaptation and bounding-box initialisation.
//!
//! Every `delta` frames the current prediction is cleaned of components that
//! do not touch the previous frame's prediction, each class is re-clustered,
//! and a class's new words are appended when at least one of them lies
//! within `alpha` of an existing word of that class. Words are never removed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{BBox, Video};
use crate::dictionary::{
    build_dictionary, class_words, pixels_by_class, Birth, Dictionary, DictionaryConfig, DictionaryError, VisualWord,
};
use crate::encoder::{encode_frame, EmbeddingMap, EncoderError, EncoderParams};
use crate::frame::{Frame, LabelMap};
use crate::matcher::{segment, segment_with_confidence, MatchError};
use crate::tensor::cosine_rows;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("box for class {class_id} covers no pixels it owns")]
    EmptyBox { class_id: u8 },
    #[error("box {0:?} lies outside the frame")]
    BoxOutOfBounds(BBox),
    #[error("every cluster of class {class_id} resembles the background")]
    AllClustersDiscarded { class_id: u8 },
    #[error("invalid adaptation configuration: {0}")]
    Config(String),
    #[error("{video}: frame 0 has no {what}")]
    MissingAnnotation { video: String, what: &'static str },
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Adaptation interval in frames; `None` disables adaptation.
    pub delta: Option<usize>,
    /// Gate radius on L2-normalised centroids, in `[0, 2]`.
    pub alpha: f32,
    /// Words proposed per class per round; defaults to the dictionary's `k_foreground`.
    pub k_new: Option<usize>,
    /// Box initialisation drops clusters at least this cosine-similar to a background word.
    pub bg_resemblance_tau: f32,
    /// Appends that would exceed this word count are refused.
    pub max_words: Option<usize>,
    /// Gate each proposed word on its own instead of admitting the whole class set.
    pub per_word_gate: bool,
    /// Drop predicted components that miss the previous prediction before re-clustering.
    pub remove_outliers: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            delta: Some(5),
            alpha: 0.5,
            k_new: None,
            bg_resemblance_tau: 0.9,
            max_words: None,
            per_word_gate: false,
            remove_outliers: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == Some(0) {
            return Err(AdaptError::Config(
                "delta must be at least 1 (null disables adaptation)".into(),
            ));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(AdaptError::Config("alpha must be non-negative".into()));
        }
        if self.k_new == Some(0) {
            return Err(AdaptError::Config("k_new must be at least 1".into()));
        }
        if !self.bg_resemblance_tau.is_finite() {
            return Err(AdaptError::Config("bg_resemblance_tau must be finite".into()));
        }
        Ok(())
    }

    pub fn adapts_at(&self, t: usize) -> bool {
        matches!(self.delta, Some(d) if t > 0 && t.is_multiple_of(d))
    }
}

/// One class's outcome in one adaptation round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub frame: usize,
    pub round: usize,
    pub class_id: u8,
    pub proposed: usize,
    pub accepted: usize,
    /// Components removed by the outlier filter in this round (all classes).
    pub regions_removed: usize,
    pub words_after: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdaptLog {
    pub records: Vec<RoundRecord>,
}

impl AdaptLog {
    pub fn rounds(&self) -> usize {
        self.records.iter().map(|r| r.round + 1).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,round,class,proposed,accepted,regions_removed,words_after\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.frame, r.round, r.class_id, r.proposed, r.accepted, r.regions_removed, r.words_after
            ));
        }
        out
    }
}

/// Relabels to background every 4-connected foreground component of `pred`
/// that shares no pixel of its class with `prev`. Returns the filtered map
/// and the number of components removed.
pub fn remove_outliers(pred: &LabelMap, prev: &LabelMap) -> Result<(LabelMap, usize)> {
    if !pred.same_extent(prev) {
        return Err(AdaptError::ShapeMismatch(format!(
            "prediction {}x{} vs previous {}x{}",
            pred.width, pred.height, prev.width, prev.height
        )));
    }
    let (w, h) = (pred.width, pred.height);
    let mut out = pred.clone();
    let mut seen = vec![false; pred.len()];
    let mut removed = 0;
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..pred.len() {
        let class = pred.labels[start];
        if class == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        component.clear();
        let mut touches = false;
        while let Some(p) = queue.pop_front() {
            component.push(p);
            touches |= prev.labels[p] == class;
            let (x, y) = (p % w, p / w);
            let neighbours = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ];
            for q in neighbours.into_iter().flatten() {
                if !seen[q] && pred.labels[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        if !touches {
            removed += 1;
            component.iter().for_each(|&p| out.labels[p] = 0);
        }
    }
    Ok((out, removed))
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|&x| x as f64 / n).collect()
}

/// Euclidean distance between the L2-normalised vectors.
pub fn gate_distance(a: &[f32], b: &[f32]) -> f32 {
    unit(a)
        .iter()
        .zip(unit(b))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// One adaptation round: re-cluster every class of `pred` and append gated words.
pub fn adapt_step(
    dict: &Dictionary,
    emb: &EmbeddingMap,
    pred: &LabelMap,
    cfg: &AdaptConfig,
    frame: usize,
    round: usize,
) -> Result<(Dictionary, Vec<RoundRecord>)> {
    if pred.width != emb.width() || pred.height != emb.height() {
        return Err(AdaptError::ShapeMismatch(format!(
            "prediction {}x{} vs embeddings {}x{}",
            pred.width,
            pred.height,
            emb.width(),
            emb.height()
        )));
    }
    let by_class = pixels_by_class(pred, dict.num_classes)?;
    let k_new = cfg.k_new.unwrap_or(dict.config.k_foreground);
    let mut next = dict.clone();
    let mut records = Vec::new();
    for (class, pixels) in by_class.iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        let class = class as u8;
        let seed = dict.config.class_seed(class).wrapping_add((round as u64 + 1) << 16);
        let proposed = class_words(emb, pixels, k_new, seed, &dict.config)?;
        let existing: Vec<&[f32]> = dict.words_of(class).map(|(_, w)| w.centroid.as_slice()).collect();
        let near = |c: &[f32]| existing.iter().any(|e| gate_distance(c, e) <= cfg.alpha);
        let admitted: Vec<&(Vec<f32>, Vec<usize>)> = if cfg.per_word_gate {
            proposed.iter().filter(|(c, _)| near(c)).collect()
        } else if proposed.iter().any(|(c, _)| near(c)) {
            proposed.iter().collect()
        } else {
            Vec::new()
        };
        let over_cap = cfg.max_words.is_some_and(|cap| next.len() + admitted.len() > cap);
        if over_cap && !admitted.is_empty() {
            log::warn!(
                "frame {frame}: refusing {} words for class {class}, cap {:?} reached",
                admitted.len(),
                cfg.max_words
            );
        }
        let accepted = if over_cap { 0 } else { admitted.len() };
        if !over_cap {
            next.words.extend(admitted.into_iter().map(|(c, m)| VisualWord {
                centroid: c.clone(),
                class_id: class,
                member_count: m.len(),
                birth: Birth {
                    frame,
                    round: round + 1,
                },
            }));
        }
        records.push(RoundRecord {
            frame,
            round,
            class_id: class,
            proposed: proposed.len(),
            accepted,
            regions_removed: 0,
            words_after: next.len(),
        });
    }
    Ok((next, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRun {
    pub predictions: Vec<LabelMap>,
    /// Max class probability per pixel scaled to `0..=255`; frame 0 is given, so 255.
    pub confidence: Vec<LabelMap>,
    pub log: AdaptLog,
    /// Dictionary size used to segment each frame.
    pub word_counts: Vec<usize>,
    pub dictionary: Dictionary,
}

/// Segments `frames[1..]` in order, adapting every `delta` frames. The
/// frame-0 output is `first` (the annotation, or its box-initialised
/// segmentation). Frame `t`'s output depends only on frames `0..=t`.
pub fn run_video(
    params: &EncoderParams,
    dict0: &Dictionary,
    frames: &[Frame],
    first: LabelMap,
    cfg: &AdaptConfig,
) -> Result<VideoRun> {
    cfg.validate()?;
    let mut dict = dict0.clone();
    let mut confidence = vec![LabelMap::filled(first.width, first.height, 255)];
    let mut predictions = vec![first];
    let mut word_counts = vec![dict.len()];
    let mut log = AdaptLog::default();
    let mut round = 0;
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let emb = encode_frame(params, frame)?;
        let (pred, conf) = segment_with_confidence(&emb, &dict)?;
        confidence.push(conf);
        word_counts.push(dict.len());
        if cfg.adapts_at(t) {
            let prev = &predictions[t - 1];
            let (pseudo, removed) = if cfg.remove_outliers {
                remove_outliers(&pred, prev)?
            } else {
                (pred.clone(), 0)
            };
            let (next, mut records) = adapt_step(&dict, &emb, &pseudo, cfg, t, round)?;
            records.iter_mut().for_each(|r| r.regions_removed = removed);
            log.records.extend(records);
            dict = next;
            round += 1;
        }
        predictions.push(pred);
    }
    Ok(VideoRun {
        predictions,
        confidence,
        log,
        word_counts,
        dictionary: dict,
    })
}

/// What frame 0 provides to build the initial dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    Mask,
    #[serde(rename = "bbox")]
    BBox,
}

/// Builds the frame-0 dictionary from the video's annotation and runs it.
/// With box supervision the frame-0 output is the box dictionary's segmentation.
pub fn segment_video(
    params: &EncoderParams,
    video: &Video,
    dict_cfg: &DictionaryConfig,
    cfg: &AdaptConfig,
    supervision: Supervision,
) -> Result<VideoRun> {
    let emb0 = encode_frame(params, &video.frames[0])?;
    let missing = |what| AdaptError::MissingAnnotation {
        video: video.name.clone(),
        what,
    };
    let (dict, first) = match supervision {
        Supervision::Mask => {
            let mask = video.first_mask().ok_or_else(|| missing("mask"))?;
            (
                build_dictionary(&emb0, mask, video.num_classes, dict_cfg)?,
                mask.clone(),
            )
        }
        Supervision::BBox => {
            let boxes = video.boxes.as_ref().ok_or_else(|| missing("boxes"))?;
            let dict = init_from_bbox(&emb0, boxes, video.num_classes, dict_cfg, cfg.bg_resemblance_tau)?;
            let first = segment(&emb0, &dict)?;
            (dict, first)
        }
    };
    run_video(params, &dict, &video.frames, first, cfg)
}

/// Builds a dictionary from frame-0 boxes instead of a mask.
///
/// Background words cluster the pixels outside every box (the outermost
/// pixel ring when boxes cover the whole frame). Each class clusters the
/// pixels of its box, later class ids winning overlaps, and drops clusters
/// whose cosine to the nearest background word reaches `tau`.
pub fn init_from_bbox(
    emb: &EmbeddingMap,
    boxes: &[BBox],
    num_classes: usize,
    dict_cfg: &DictionaryConfig,
    tau: f32,
) -> Result<Dictionary> {
    let (w, h) = (emb.width(), emb.height());
    let mut owner = vec![0u8; w * h];
    let mut sorted: Vec<&BBox> = boxes.iter().collect();
    sorted.sort_by_key(|b| b.class_id);
    for b in &sorted {
        if b.x1 >= w || b.y1 >= h || b.class_id as usize > num_classes || b.class_id == 0 {
            return Err(AdaptError::BoxOutOfBounds(**b));
        }
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                owner[y * w + x] = b.class_id;
            }
        }
    }
    let mut bg: Vec<usize> = (0..w * h).filter(|&p| owner[p] == 0).collect();
    if bg.is_empty() {
        bg = (0..w * h)
            .filter(|&p| {
                let (x, y) = (p % w, p / w);
                x == 0 || y == 0 || x + 1 == w || y + 1 == h
            })
            .collect();
    }
    let mut dict = Dictionary::new(emb.dim(), num_classes, *dict_cfg);
    for (c, m) in class_words(emb, &bg, dict_cfg.words_for_class(0), dict_cfg.class_seed(0), dict_cfg)? {
        dict.words.push(VisualWord {
            centroid: c,
            class_id: 0,
            member_count: m.len(),
            birth: Birth::default(),
        });
    }
    let bg_words = dict.word_matrix();
    for b in sorted {
        let class = b.class_id;
        let pixels: Vec<usize> = (0..w * h).filter(|&p| owner[p] == class).collect();
        if pixels.is_empty() {
            return Err(AdaptError::EmptyBox { class_id: class });
        }
        let clusters = class_words(
            emb,
            &pixels,
            dict_cfg.words_for_class(class),
            dict_cfg.class_seed(class),
            dict_cfg,
        )?;
        let rows: Vec<Vec<f32>> = clusters.iter().map(|(c, _)| c.clone()).collect();
        let cos = cosine_rows(&Tensor::from_rows(&rows)?, &bg_words)?;
        let before = dict.len();
        for (i, (c, m)) in clusters.into_iter().enumerate() {
            let nearest = cos.row(i).iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if nearest < tau {
                dict.words.push(VisualWord {
                    centroid: c,
                    class_id: class,
                    member_count: m.len(),
                    birth: Birth::default(),
                });
            }
        }
        if dict.len() == before {
            return Err(AdaptError::AllClustersDiscarded { class_id: class });
        }
    }
    Ok(dict)
}
