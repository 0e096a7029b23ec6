//! Episodic meta-training of the encoder.
//!
//! Each episode builds a dictionary from the first frame of one video and
//! scores the cross-entropy of a few later frames against it. Only encoder
//! parameters and optimiser moments survive between episodes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Video;
use crate::dictionary::{build_dictionary_with_members, Dictionary, DictionaryConfig, DictionaryError, Representation};
use crate::encoder::{encode_on_tape, init_params, EmbeddingMap, EncoderConfig, EncoderError, EncoderParams};
use crate::frame::{Frame, LabelMap};
use crate::matcher::{pixel_loss_on_tape, MatchError};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Query label for pixels whose class is absent from the support frame.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("video {video} has {annotated} usable annotated frames; an episode needs frame 0 and one later frame")]
    TooShortVideo { video: String, annotated: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("episode {episode} produced a non-finite value: {source}")]
    NonFinite {
        episode: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub queries_per_episode: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub k_foreground: usize,
    pub background_multiplier: usize,
    pub normalize_embeddings: bool,
    pub seed: u64,
    /// Differentiate through the centroid means instead of treating words as constants.
    pub backprop_through_centroids: bool,
    /// Checkpoint interval in episodes; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            queries_per_episode: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            k_foreground: 8,
            background_multiplier: 4,
            normalize_embeddings: false,
            seed: 0,
            backprop_through_centroids: false,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries_per_episode == 0 {
            return Err(TrainError::Config("queries_per_episode must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(TrainError::Config("moment decays must lie in [0, 1)".into()));
        }
        if self.k_foreground == 0 || self.background_multiplier == 0 {
            return Err(TrainError::Config(
                "k_foreground and background_multiplier must be positive".into(),
            ));
        }
        if self.backprop_through_centroids && self.normalize_embeddings {
            return Err(TrainError::Config(
                "backprop_through_centroids is not supported with normalize_embeddings".into(),
            ));
        }
        Ok(())
    }

    /// Dictionary settings for one episode.
    pub fn dictionary_config(&self, episode: usize) -> DictionaryConfig {
        DictionaryConfig {
            k_foreground: self.k_foreground,
            background_multiplier: self.background_multiplier,
            seed: self.seed.wrapping_add(episode as u64),
            normalize_embeddings: self.normalize_embeddings,
            representation: Representation::Clusters,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub index: usize,
    pub frame: Frame,
    /// Ground truth with classes missing from the support mapped to [`IGNORE_LABEL`].
    pub mask: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub video_id: String,
    pub num_classes: usize,
    pub support_frame: Frame,
    pub support_mask: LabelMap,
    pub queries: Vec<Query>,
}

fn annotated_later(video: &Video) -> Vec<usize> {
    (1..video.len()).filter(|&t| video.masks[t].is_some()).collect()
}

fn check_trainable(video: &Video) -> Result<()> {
    let later = annotated_later(video);
    if video.first_mask().is_none() || later.is_empty() {
        return Err(TrainError::TooShortVideo {
            video: video.name.clone(),
            annotated: later.len() + usize::from(video.first_mask().is_some()),
        });
    }
    Ok(())
}

/// Support is frame 0. The horizon is drawn from `[min(3, len-1), len-1]`
/// and queries without replacement from the annotated frames in `[1, horizon]`
/// (all later annotated frames if that window holds none).
pub fn sample_episode(video: &Video, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<Episode> {
    check_trainable(video)?;
    let last = video.len() - 1;
    let horizon = rng.random_range(last.min(3)..=last);
    let all = annotated_later(video);
    let window: Vec<usize> = all.iter().copied().filter(|&t| t <= horizon).collect();
    let pool = if window.is_empty() { all } else { window };
    let n = cfg.queries_per_episode.min(pool.len());
    let mut picked: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();

    let support_mask = video.masks[0].clone().expect("checked");
    let mut present = [false; 256];
    support_mask.labels.iter().for_each(|&l| present[l as usize] = true);
    let queries = picked
        .into_iter()
        .map(|t| {
            let mut mask = video.masks[t].clone().expect("annotated");
            mask.labels
                .iter_mut()
                .filter(|l| !present[**l as usize])
                .for_each(|l| *l = IGNORE_LABEL);
            Query {
                index: t,
                frame: video.frames[t].clone(),
                mask,
            }
        })
        .collect();
    Ok(Episode {
        video_id: video.name.clone(),
        num_classes: video.num_classes,
        support_frame: video.frames[0].clone(),
        support_mask,
        queries,
    })
}

/// Word memberships to reuse instead of re-clustering (support pixel indices per word).
pub type Memberships = Vec<(u8, Vec<usize>)>;

/// Builds the episode dictionary from the support frame only.
pub fn episode_dictionary(
    support: &EmbeddingMap,
    episode: &Episode,
    dict_cfg: &DictionaryConfig,
) -> Result<(Dictionary, Memberships)> {
    let (dict, members) = build_dictionary_with_members(support, &episode.support_mask, episode.num_classes, dict_cfg)?;
    let memberships = dict.words.iter().map(|w| w.class_id).zip(members).collect();
    Ok((dict, memberships))
}

/// Records the episode loss on `tape` using parameter leaves `ids`.
///
/// With `frozen`, the given memberships replace k-means and the words are the
/// (differentiable) means of their members; this is the form used to check
/// gradients, since clustering itself is piecewise constant.
pub fn episode_loss_on_tape(
    tape: &mut Tape,
    config: &EncoderConfig,
    ids: &[NodeId],
    episode: &Episode,
    cfg: &TrainConfig,
    dict_cfg: &DictionaryConfig,
    frozen: Option<&Memberships>,
) -> Result<NodeId> {
    let (h, w) = (episode.support_frame.height, episode.support_frame.width);
    let d = config.embedding_dim;
    let support = encode_on_tape(tape, config, ids, &episode.support_frame.to_tensor())?;
    let support_rows = tape.reshape(support, vec![h * w, d])?;
    let emb = EmbeddingMap::new(tape.value(support).clone())?;
    let (dict, memberships) = match frozen {
        Some(m) => (None, m.clone()),
        None => {
            let (dict, m) = episode_dictionary(&emb, episode, dict_cfg)?;
            (Some(dict), m)
        }
    };
    let class_ids: Vec<usize> = memberships.iter().map(|(c, _)| *c as usize).collect();
    let words = match dict {
        Some(dict) if !cfg.backprop_through_centroids => tape.constant(dict.word_matrix()),
        _ => {
            let mut avg = vec![0.0f32; memberships.len() * h * w];
            for (k, (_, members)) in memberships.iter().enumerate() {
                let share = 1.0 / members.len() as f32;
                members.iter().for_each(|&p| avg[k * h * w + p] = share);
            }
            let avg = tape.constant(Tensor::new(vec![memberships.len(), h * w], avg)?);
            tape.matmul(avg, support_rows)?
        }
    };

    let groups = episode.num_classes + 1;
    let mut losses = Vec::with_capacity(episode.queries.len());
    for q in &episode.queries {
        let emb = encode_on_tape(tape, config, ids, &q.frame.to_tensor())?;
        let rows = tape.reshape(emb, vec![q.frame.height * q.frame.width, d])?;
        losses.push(pixel_loss_on_tape(
            tape,
            rows,
            words,
            class_ids.clone(),
            groups,
            &q.mask,
            Some(IGNORE_LABEL),
        )?);
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let all = tape.concat(&losses, 0)?;
    Ok(tape.mean(all)?)
}

/// Evaluates the episode loss without recording gradients.
pub fn episode_loss(params: &EncoderParams, episode: &Episode, cfg: &TrainConfig, episode_index: usize) -> Result<f32> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .named()
        .into_iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect();
    let loss = episode_loss_on_tape(
        &mut tape,
        &params.config,
        &ids,
        episode,
        cfg,
        &cfg.dictionary_config(episode_index),
        None,
    )?;
    Ok(tape.value(loss).item())
}

/// Adaptive-moment optimiser state for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: Vec<Vec<f32>> = params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Applies one update from the parameters' grad slots and clears them.
    pub fn step(&mut self, params: &mut EncoderParams, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for ((t, m), v) in params.tensors_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                *x -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
            t.zero_grad();
        }
    }
}

/// Reported after every episode.
pub struct Progress<'a> {
    pub episode: usize,
    pub loss: f32,
    pub params: &'a EncoderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: EncoderParams,
    pub losses: Vec<f32>,
}

pub fn meta_train(videos: &[Video], cfg: &TrainConfig) -> Result<Trained> {
    meta_train_with(videos, cfg, init_params(cfg.seed, cfg.encoder), |_| {
        Ok::<_, TrainError>(())
    })
}

/// Runs `cfg.episodes` episodes from `params`, calling `observe` after each
/// update. An error from `observe` stops training and is returned as is.
pub fn meta_train_with<F, E>(
    videos: &[Video],
    cfg: &TrainConfig,
    mut params: EncoderParams,
    mut observe: F,
) -> std::result::Result<Trained, E>
where
    F: FnMut(Progress<'_>) -> std::result::Result<(), E>,
    E: From<TrainError>,
{
    cfg.validate()?;
    if videos.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    videos.iter().try_for_each(check_trainable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&params);
    let mut losses = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let video = &videos[rng.random_range(0..videos.len())];
        let ep = sample_episode(video, &mut rng, cfg)?;
        let mut tape = Tape::new();
        params.set_requires_grad(true);
        let ids = params.register(&mut tape);
        let non_finite = |source| TrainError::NonFinite { episode, source };
        let loss = episode_loss_on_tape(
            &mut tape,
            &params.config,
            &ids,
            &ep,
            cfg,
            &cfg.dictionary_config(episode),
            None,
        )
        .map_err(|e| match e {
            TrainError::Tensor(t @ TensorError::NonFinite { .. }) => non_finite(t),
            TrainError::Encoder(EncoderError::Tensor(t @ TensorError::NonFinite { .. })) => non_finite(t),
            TrainError::Match(MatchError::Tensor(t @ TensorError::NonFinite { .. })) => non_finite(t),
            other => other,
        })?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).map_err(non_finite)?;
        params.zero_grad();
        params.absorb_grads(&ids, &grads).map_err(TrainError::from)?;
        adam.step(&mut params, cfg);
        params.set_requires_grad(false);
        losses.push(value);
        observe(Progress {
            episode,
            loss: value,
            params: &params,
        })?;
    }
    params.set_requires_grad(false);
    Ok(Trained { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(len: usize, annotated: &[usize]) -> Video {
        let frames = (0..len).map(|t| Frame::filled(8, 8, [t as u8, 0, 0])).collect();
        let masks = (0..len)
            .map(|t| {
                annotated
                    .contains(&t)
                    .then(|| LabelMap::from_fn(8, 8, |x, _| u8::from(x < 4)))
            })
            .collect();
        Video {
            name: "v".into(),
            frames,
            masks,
            parts: vec![None; len],
            num_classes: 1,
            boxes: None,
        }
    }

    #[test]
    fn two_frame_video_queries_frame_one() {
        let cfg = TrainConfig {
            queries_per_episode: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let ep = sample_episode(&video(2, &[0, 1]), &mut rng, &cfg).unwrap();
            assert_eq!(ep.queries.len(), 1);
            assert_eq!(ep.queries[0].index, 1);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let v = video(12, &(0..12).collect::<Vec<_>>());
        let cfg = TrainConfig::default();
        let a = sample_episode(&v, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
        let b = sample_episode(&v, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_later_frame_is_reachable() {
        let v = video(12, &(0..12).collect::<Vec<_>>());
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 12];
        for _ in 0..10_000 {
            let ep = sample_episode(&v, &mut rng, &cfg).unwrap();
            assert_eq!(ep.queries.len(), 2);
            assert!(ep.queries[0].index < ep.queries[1].index);
            for q in &ep.queries {
                counts[q.index] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        assert!(counts[1..].iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn short_videos_are_rejected() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_episode(&video(1, &[0]), &mut rng, &cfg),
            Err(TrainError::TooShortVideo { annotated: 1, .. })
        ));
        assert!(matches!(
            sample_episode(&video(5, &[1, 2]), &mut rng, &cfg),
            Err(TrainError::TooShortVideo { .. })
        ));
    }

    #[test]
    fn classes_missing_from_support_are_ignored() {
        let mut v = video(3, &[0, 1, 2]);
        v.num_classes = 2;
        v.masks[2] = Some(LabelMap::from_fn(8, 8, |x, _| if x < 2 { 2 } else { 1 }));
        let cfg = TrainConfig {
            queries_per_episode: 2,
            ..Default::default()
        };
        let ep = sample_episode(&v, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        let q = ep.queries.iter().find(|q| q.index == 2).unwrap();
        assert_eq!(q.mask.count(IGNORE_LABEL), 16);
        assert_eq!(q.mask.count(1), 48);
    }

    #[test]
    fn zero_episodes_returns_initial_params() {
        let cfg = TrainConfig {
            episodes: 0,
            ..Default::default()
        };
        let out = meta_train(&[video(3, &[0, 1, 2])], &cfg).unwrap();
        assert_eq!(out.params, init_params(cfg.seed, cfg.encoder));
        assert!(out.losses.is_empty());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = init_params(
            0,
            EncoderConfig {
                embedding_dim: 2,
                layers: 1,
                width: 2,
                kernel_size: 3,
            },
        );
        let before = p.projection.data().to_vec();
        let n = p.projection.numel();
        p.projection.accumulate_grad(&vec![-3.0; n]).unwrap();
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &cfg);
        for (a, b) in p.projection.data().iter().zip(&before) {
            assert!((a - b - 1e-3).abs() < 1e-6);
        }
        assert!(p.projection.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }
}
