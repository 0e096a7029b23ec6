//! Pixel classification against a dictionary.
//!
//! Word posteriors are a softmax over raw cosine similarities to every word
//! (no temperature). The class posterior takes, per class, the best word
//! posterior and renormalises over classes, so each pixel is explained by the
//! single most relevant word of each object.

use thiserror::Error;

use crate::dictionary::Dictionary;
use crate::encoder::EmbeddingMap;
use crate::frame::LabelMap;
use crate::tensor::{self, forward, NodeId, Primitive, Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("embedding dim {embedding} does not match word dim {word}")]
    DimMismatch { embedding: usize, word: usize },
    #[error("dictionary has no words")]
    EmptyDictionary,
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// `[pixels, words]` probabilities; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WordPosterior(pub Tensor);

/// `[pixels, C + 1]` probabilities; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior(pub Tensor);

impl WordPosterior {
    pub fn num_pixels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_words(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, pixel: usize) -> &[f32] {
        self.0.row(pixel)
    }
}

impl ClassPosterior {
    pub fn num_pixels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, pixel: usize) -> &[f32] {
        self.0.row(pixel)
    }

    /// Argmax class per pixel; exact ties go to the lower class id.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.num_pixels())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Highest class probability per pixel.
    pub fn confidence(&self) -> Vec<f32> {
        (0..self.num_pixels())
            .map(|i| self.row(i).iter().copied().fold(0.0, f32::max))
            .collect()
    }
}

fn check_dims(emb: &EmbeddingMap, dict: &Dictionary) -> Result<()> {
    if dict.is_empty() {
        return Err(MatchError::EmptyDictionary);
    }
    if emb.dim() != dict.dim {
        return Err(MatchError::DimMismatch {
            embedding: emb.dim(),
            word: dict.dim,
        });
    }
    Ok(())
}

pub fn word_posteriors(emb: &EmbeddingMap, dict: &Dictionary) -> Result<WordPosterior> {
    check_dims(emb, dict)?;
    let cos = tensor::cosine_rows(&emb.rows(), &dict.word_matrix())?;
    Ok(WordPosterior(forward(&Primitive::SoftmaxRows, &[&cos])?))
}

pub fn class_posteriors(wp: &WordPosterior, dict: &Dictionary) -> Result<ClassPosterior> {
    if wp.num_words() != dict.len() {
        return Err(MatchError::Shape(format!(
            "{} word columns for a dictionary of {}",
            wp.num_words(),
            dict.len()
        )));
    }
    let grouped = forward(
        &Primitive::GroupMax {
            group_of: dict.class_ids(),
            groups: dict.num_groups(),
        },
        &[&wp.0],
    )?;
    Ok(ClassPosterior(forward(&Primitive::NormalizeRows, &[&grouped])?))
}

pub fn classify(emb: &EmbeddingMap, dict: &Dictionary) -> Result<ClassPosterior> {
    class_posteriors(&word_posteriors(emb, dict)?, dict)
}

/// Argmax label map (ties toward background / lower class id).
pub fn segment(emb: &EmbeddingMap, dict: &Dictionary) -> Result<LabelMap> {
    let cp = classify(emb, dict)?;
    Ok(LabelMap::new(emb.width(), emb.height(), cp.argmax()))
}

/// Segmentation plus a per-pixel max-probability map scaled to 0..=255.
pub fn segment_with_confidence(emb: &EmbeddingMap, dict: &Dictionary) -> Result<(LabelMap, LabelMap)> {
    let cp = classify(emb, dict)?;
    let conf = cp.confidence().into_iter().map(|p| (p * 255.0).round() as u8).collect();
    Ok((
        LabelMap::new(emb.width(), emb.height(), cp.argmax()),
        LabelMap::new(emb.width(), emb.height(), conf),
    ))
}

/// For each pixel, the index of the most probable word of `class`
/// (lowest index on ties), or `None` when the class has no words.
pub fn best_word_of_class(wp: &WordPosterior, dict: &Dictionary, class: u8) -> Vec<Option<usize>> {
    let candidates: Vec<usize> = dict.words_of(class).map(|(i, _)| i).collect();
    (0..wp.num_pixels())
        .map(|p| {
            let row = wp.row(p);
            candidates
                .iter()
                .copied()
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
        })
        .collect()
}

/// Mean cross-entropy of the true labels under `cp`, skipping `ignore`.
pub fn pixel_loss(cp: &ClassPosterior, labels: &LabelMap, ignore: Option<u8>) -> Result<f32> {
    if labels.len() != cp.num_pixels() {
        return Err(MatchError::Shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            cp.num_pixels()
        )));
    }
    let targets = labels.labels.iter().map(|&l| l as usize).collect();
    let loss = forward(
        &Primitive::NllMean {
            targets,
            ignore: ignore.map(usize::from),
        },
        &[&cp.0],
    )?;
    Ok(loss.item())
}

/// Records the class posterior for `rows` (`[n, d]`) against `words`
/// (`[m, d]`) on `tape`.
pub fn class_posteriors_on_tape(
    tape: &mut Tape,
    rows: NodeId,
    words: NodeId,
    class_ids: Vec<usize>,
    groups: usize,
) -> Result<NodeId> {
    let cos = tape.cosine_rows(rows, words)?;
    let wp = tape.softmax_rows(cos)?;
    let best = tape.group_max(wp, class_ids, groups)?;
    Ok(tape.normalize_rows(best)?)
}

/// Records the cross-entropy of `labels` under the class posterior.
pub fn pixel_loss_on_tape(
    tape: &mut Tape,
    rows: NodeId,
    words: NodeId,
    class_ids: Vec<usize>,
    groups: usize,
    labels: &LabelMap,
    ignore: Option<u8>,
) -> Result<NodeId> {
    let cp = class_posteriors_on_tape(tape, rows, words, class_ids, groups)?;
    let targets = labels.labels.iter().map(|&l| l as usize).collect();
    Ok(tape.nll_mean(cp, targets, ignore.map(usize::from))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{Birth, DictionaryConfig, VisualWord};

    fn dict(words: &[(&[f32], u8)], num_classes: usize) -> Dictionary {
        let mut d = Dictionary::new(words[0].0.len(), num_classes, DictionaryConfig::default());
        for (c, class) in words {
            d.words.push(VisualWord {
                centroid: c.to_vec(),
                class_id: *class,
                member_count: 1,
                birth: Birth::default(),
            });
        }
        d
    }

    fn single_pixel(e: &[f32]) -> EmbeddingMap {
        EmbeddingMap::from_pixels(1, 1, e.len(), e.to_vec()).unwrap()
    }

    #[test]
    fn one_word_takes_all_mass() {
        let d = dict(&[(&[0.2, 0.9], 0)], 0);
        let wp = word_posteriors(&single_pixel(&[1.0, -3.0]), &d).unwrap();
        assert_eq!(wp.row(0), &[1.0]);
    }

    #[test]
    fn equidistant_words_split_evenly() {
        let d = dict(&[(&[1.0, 1.0], 0), (&[1.0, -1.0], 1)], 1);
        let wp = word_posteriors(&single_pixel(&[1.0, 0.0]), &d).unwrap();
        assert!((wp.row(0)[0] - 0.5).abs() < 1e-7 && (wp.row(0)[1] - 0.5).abs() < 1e-7);
        let cp = class_posteriors(&wp, &d).unwrap();
        assert!((cp.row(0)[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_of_raw_cosines() {
        let d = dict(&[(&[1.0, 0.0], 0), (&[0.0, 1.0], 1)], 1);
        let wp = word_posteriors(&single_pixel(&[1.0, 0.0]), &d).unwrap();
        let e = std::f64::consts::E;
        let want = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!((wp.row(0)[0] as f64 - want[0]).abs() < 1e-6);
        assert!((wp.row(0)[1] as f64 - want[1]).abs() < 1e-6);
        assert!((wp.row(0)[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn class_posterior_uses_best_word_per_class() {
        let d = dict(&[(&[1.0], 1), (&[1.0], 1), (&[1.0], 2), (&[1.0], 2)], 2);
        let wp = WordPosterior(Tensor::new(vec![1, 4], vec![0.5, 0.1, 0.3, 0.1]).unwrap());
        let cp = class_posteriors(&wp, &d).unwrap();
        assert_eq!(cp.row(0)[0], 0.0);
        assert!((cp.row(0)[1] - 0.625).abs() < 1e-7);
        assert!((cp.row(0)[2] - 0.375).abs() < 1e-7);
    }

    #[test]
    fn single_class_dictionary_is_certain() {
        let d = dict(&[(&[0.3, 0.1], 0), (&[-1.0, 0.4], 0)], 0);
        let cp = classify(&single_pixel(&[0.5, 0.5]), &d).unwrap();
        assert_eq!(cp.row(0), &[1.0]);
    }

    #[test]
    fn identical_words_tie_to_background() {
        let d = dict(&[(&[1.0, 2.0], 0), (&[1.0, 2.0], 1), (&[1.0, 2.0], 2)], 2);
        let emb = EmbeddingMap::from_pixels(2, 2, 2, vec![0.1, 1.0, 3.0, -1.0, 0.5, 0.5, -2.0, 0.1]).unwrap();
        assert_eq!(segment(&emb, &d).unwrap().labels, vec![0; 4]);
    }

    #[test]
    fn loss_reference_values() {
        let perfect = ClassPosterior(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let labels = LabelMap::new(2, 1, vec![0, 1]);
        assert_eq!(pixel_loss(&perfect, &labels, None).unwrap(), 0.0);
        let uniform = ClassPosterior(Tensor::full(&[2, 2], 0.5));
        assert!((pixel_loss(&uniform, &labels, None).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(
            pixel_loss(&uniform, &labels, Some(255)).unwrap(),
            pixel_loss(&uniform, &labels, None).unwrap()
        );
    }

    #[test]
    fn mixed_loss_matches_hand_computation() {
        let probs = vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.5, 0.5];
        let cp = ClassPosterior(Tensor::new(vec![4, 2], probs).unwrap());
        let labels = LabelMap::new(4, 1, vec![0, 1, 1, 0]);
        let want = -((0.9f64).ln() + (0.8f64).ln() + (0.4f64).ln() + (0.5f64).ln()) / 4.0;
        assert!((pixel_loss(&cp, &labels, None).unwrap() as f64 - want).abs() < 1e-6);
        assert!(matches!(
            pixel_loss(&cp, &LabelMap::filled(4, 1, 7), Some(7)),
            Err(MatchError::Tensor(TensorError::AllIgnored))
        ));
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let d = dict(&[(&[1.0, 0.0, 0.0], 0)], 0);
        assert_eq!(
            word_posteriors(&single_pixel(&[1.0, 0.0]), &d),
            Err(MatchError::DimMismatch { embedding: 2, word: 3 })
        );
    }

    #[test]
    fn tape_and_direct_paths_agree() {
        let d = dict(&[(&[1.0, 0.2], 0), (&[0.1, 1.0], 1), (&[-0.5, 0.5], 1)], 1);
        let emb = EmbeddingMap::from_pixels(1, 3, 2, vec![0.9, 0.1, 0.2, 0.8, -0.3, 0.6]).unwrap();
        let direct = classify(&emb, &d).unwrap();
        let mut tape = Tape::new();
        let rows = tape.constant(emb.rows());
        let words = tape.constant(d.word_matrix());
        let cp = class_posteriors_on_tape(&mut tape, rows, words, d.class_ids(), d.num_groups()).unwrap();
        assert_eq!(tape.value(cp), &direct.0);
    }
}
