//! File formats, dataset layout and the synthetic video generator.

mod checkpoint;
mod container;
mod pnm;
pub mod synth;
mod video;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use checkpoint::{load_dictionary, load_encoder, save_dictionary, save_encoder};
pub use container::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAX_RANK};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_frame, read_mask, write_frame, write_mask};
pub use synth::{generate_dataset, generate_synthetic, DatasetConfig, Occlusion, SynthConfig};
pub use video::{
    bbox_path, format_boxes, frame_path, load_dataset, mask_path, parse_boxes, parts_path, read_video, write_video,
    BBox, Manifest, ManifestEntry, Video, VideoMeta,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic, expected {expected}")]
    BadMagic { expected: String },
    #[error("file is truncated")]
    TruncatedFile,
    #[error("label {value} exceeds the class count {num_classes}")]
    OversizedLabel { value: u8, num_classes: usize },
    #[error("payload holds {found} bytes, header implies {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("inconsistent data: {0}")]
    Inconsistent(String),
    #[error("object {object} needs {needed:.1} px but the frame is {width}x{height}")]
    ObjectTooLarge {
        object: usize,
        needed: f32,
        width: usize,
        height: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return DataError::Missing(path.to_path_buf());
        }
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable value");
    text.push('\n');
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}
