//! Meta-learned visual-word dictionaries for one-shot video object segmentation.
//!
//! A small convolutional encoder embeds every pixel. Each object in the first
//! frame is summarised by k-means centroids ("visual words") of its pixel
//! embeddings; later pixels are classified by a cosine softmax over all words
//! followed by a max-over-words class normalisation. The encoder is trained
//! episodically so that dictionaries built from one frame classify the rest
//! of the video well, and dictionaries grow online as the video plays.

pub mod adapt;
pub mod dataio;
pub mod dictionary;
pub mod encoder;
pub mod frame;
pub mod matcher;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use frame::{Frame, LabelMap};
