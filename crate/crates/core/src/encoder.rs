//! Small fully-convolutional embedding network.
//!
//! `L` stride-1 3×3 convolutions with ReLU, then a constant-one channel is
//! appended and a 1×1 projection maps every pixel to `d` dimensions. Spatial
//! extents never change, so the embedding map is pixel-aligned with the frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("frame must be [H, W, 3] with H, W >= {min}; got {shape:?}")]
    BadFrameShape { shape: Vec<usize>, min: usize },
    #[error("parameter set does not match the encoder configuration: {0}")]
    BadParams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub layers: usize,
    pub width: usize,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            layers: 4,
            width: 32,
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    /// Pixels this far from the border see zero padding somewhere in their receptive field.
    pub fn receptive_radius(&self) -> usize {
        self.layers * (self.kernel_size / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub convs: Vec<ConvLayer>,
    /// `[width + 1, d]`; the last row multiplies the constant channel.
    pub projection: Tensor,
}

/// Kaiming-normal initialisation, reproducible per seed.
pub fn init_params(seed: u64, config: EncoderConfig) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let mut sample = |shape: &[usize], fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    };
    let mut convs = Vec::with_capacity(config.layers);
    let mut cin = 3;
    for _ in 0..config.layers {
        let weight = sample(&[k, k, cin, config.width], k * k * cin);
        convs.push(ConvLayer {
            weight,
            bias: Tensor::zeros(&[config.width]),
        });
        cin = config.width;
    }
    let projection = sample(&[cin + 1, config.embedding_dim], cin + 1);
    EncoderParams {
        config,
        convs,
        projection,
    }
}

impl EncoderParams {
    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 1);
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("proj.weight".to_string(), &self.projection));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.convs.len() + 1);
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.projection);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(flag));
    }

    /// Rebuilds parameters from named tensors (the inverse of [`EncoderParams::named`]).
    pub fn from_named(config: EncoderConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let template = init_params(0, config);
        let mut tensors = Vec::new();
        for (name, t) in template.named() {
            let loaded = lookup(&name).ok_or_else(|| EncoderError::BadParams(format!("missing {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(EncoderError::BadParams(format!(
                    "{name}: expected {:?}, found {:?}",
                    t.shape(),
                    loaded.shape()
                )));
            }
            tensors.push(loaded);
        }
        let projection = tensors.pop().expect("projection");
        let mut it = tensors.into_iter();
        let convs = (0..config.layers)
            .map(|_| ConvLayer {
                weight: it.next().expect("weight"),
                bias: it.next().expect("bias"),
            })
            .collect();
        Ok(Self {
            config,
            convs,
            projection,
        })
    }

    /// Records every parameter as a tape leaf, in [`EncoderParams::named`] order.
    pub fn register(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.named().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Writes tape gradients back into the parameters' grad slots.
    pub fn absorb_grads(&mut self, ids: &[NodeId], grads: &crate::tensor::Gradients) -> Result<()> {
        for (t, &id) in self.tensors_mut().into_iter().zip(ids) {
            grads.write_into(id, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

fn check_frame(frame: &Tensor, config: &EncoderConfig) -> Result<()> {
    let s = frame.shape();
    let min = config.kernel_size.max(1);
    if s.len() != 3 || s[2] != 3 || s[0] < min || s[1] < min {
        return Err(EncoderError::BadFrameShape { shape: s.to_vec(), min });
    }
    Ok(())
}

/// Records the forward pass for `frame` (`[H, W, 3]` in `[0, 1]`) using
/// parameter leaves `ids` from [`EncoderParams::register`]. Returns `[H, W, d]`.
pub fn encode_on_tape(tape: &mut Tape, config: &EncoderConfig, ids: &[NodeId], frame: &Tensor) -> Result<NodeId> {
    check_frame(frame, config)?;
    if ids.len() != 2 * config.layers + 1 {
        return Err(EncoderError::BadParams(format!("{} parameter leaves", ids.len())));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let x = tape.constant(frame.clone());
    let centre = tape.constant(Tensor::full(&[3], -0.5));
    let mut feat = tape.add(x, centre)?;
    for layer in 0..config.layers {
        let conv = tape.conv2d(feat, ids[2 * layer])?;
        let biased = tape.add(conv, ids[2 * layer + 1])?;
        feat = tape.relu(biased)?;
    }
    let width = tape.value(feat).shape()[2];
    let ones = tape.constant(Tensor::full(&[h, w, 1], 1.0));
    let with_bias = tape.concat(&[feat, ones], 2)?;
    let rows = tape.reshape(with_bias, vec![h * w, width + 1])?;
    let emb = tape.matmul(rows, ids[2 * config.layers])?;
    Ok(tape.reshape(emb, vec![h, w, config.embedding_dim])?)
}

/// Identifies which frame an embedding map came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRef {
    pub video: String,
    pub frame: usize,
}

/// Per-pixel embeddings, `[H, W, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    data: Tensor,
    pub source: Option<FrameRef>,
}

impl EmbeddingMap {
    pub fn new(data: Tensor) -> std::result::Result<Self, TensorError> {
        if data.rank() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_map",
                detail: format!("expected [H, W, d], got {:?}", data.shape()),
            });
        }
        Ok(Self { data, source: None })
    }

    pub fn with_source(mut self, video: impl Into<String>, frame: usize) -> Self {
        self.source = Some(FrameRef {
            video: video.into(),
            frame,
        });
        self
    }

    /// Builds a map from per-pixel rows in row-major pixel order.
    pub fn from_pixels(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> std::result::Result<Self, TensorError> {
        Self::new(Tensor::new(vec![height, width, dim], data)?)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data.data()[i * d..(i + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `[H*W, d]` copy of the embeddings.
    pub fn rows(&self) -> Tensor {
        self.data
            .clone()
            .reshape(vec![self.num_pixels(), self.dim()])
            .expect("same element count")
    }
}

/// Embeds one frame tensor with frozen parameters.
pub fn encode(params: &EncoderParams, frame: &Tensor) -> Result<EmbeddingMap> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .named()
        .into_iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect();
    let out = encode_on_tape(&mut tape, &params.config, &ids, frame)?;
    Ok(EmbeddingMap::new(tape.value(out).clone())?)
}

pub fn encode_frame(params: &EncoderParams, frame: &Frame) -> Result<EmbeddingMap> {
    encode(params, &frame.to_tensor())
}
