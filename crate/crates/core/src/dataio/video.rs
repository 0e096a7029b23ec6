//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<video>/video.json
//! <root>/<video>/frame_00000.ppm         RGB frame
//! <root>/<video>/mask_00000.pgm          class ids (frame 0 required unless a bbox file exists)
//! <root>/<video>/frame_00000.parts.pgm   part ids 1..P per object, 0 elsewhere
//! <root>/<video>/bbox_00000.txt          "class_id x0 y0 x1 y1" per line, inclusive
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_frame, read_mask, write_frame, write_mask};
use super::{DataError, Result};
use crate::frame::{Frame, LabelMap};

/// Inclusive pixel rectangle around one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    /// Tight box around `class` in `mask`, if present.
    pub fn around(mask: &LabelMap, class: u8) -> Option<Self> {
        let mut b: Option<BBox> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) != class {
                    continue;
                }
                b = Some(match b {
                    None => BBox {
                        class_id: class,
                        x0: x,
                        y0: y,
                        x1: x,
                        y1: y,
                    },
                    Some(b) => BBox {
                        x0: b.x0.min(x),
                        y0: b.y0.min(y),
                        x1: b.x1.max(x),
                        y1: b.y1.max(y),
                        ..b
                    },
                });
            }
        }
        b
    }
}

/// A frame sequence with its annotations, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Frame>,
    /// Ground-truth masks; `None` for unannotated frames.
    pub masks: Vec<Option<LabelMap>>,
    pub parts: Vec<Option<LabelMap>>,
    pub num_classes: usize,
    /// Frame-0 boxes, when box supervision is provided.
    pub boxes: Option<Vec<BBox>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn first_mask(&self) -> Option<&LabelMap> {
        self.masks.first().and_then(Option::as_ref)
    }

    /// Checks the structural invariants: one resolution, frame 0 annotated by mask or boxes.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(DataError::Inconsistent(format!("{}: no frames", self.name)));
        }
        let (w, h) = (self.width(), self.height());
        let extents_ok = self.frames.iter().all(|f| f.width == w && f.height == h)
            && self
                .masks
                .iter()
                .chain(&self.parts)
                .flatten()
                .all(|m| m.width == w && m.height == h);
        if !extents_ok {
            return Err(DataError::Inconsistent(format!("{}: mixed resolutions", self.name)));
        }
        if self.masks.len() != self.frames.len() || self.parts.len() != self.frames.len() {
            return Err(DataError::Inconsistent(format!("{}: annotation count", self.name)));
        }
        if self.first_mask().is_none() && self.boxes.is_none() {
            return Err(DataError::Inconsistent(format!(
                "{}: frame 0 needs a mask or boxes",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub name: String,
    pub num_classes: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.ppm"))
}

pub fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:05}.pgm"))
}

pub fn parts_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.parts.pgm"))
}

pub fn bbox_path(dir: &Path) -> PathBuf {
    dir.join("bbox_00000.txt")
}

pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let v: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| DataError::Format(format!("bad bbox line {line:?}")))?;
            match v[..] {
                [c, x0, y0, x1, y1] if x0 <= x1 && y0 <= y1 && (1..=255).contains(&c) => Ok(BBox {
                    class_id: c as u8,
                    x0,
                    y0,
                    x1,
                    y1,
                }),
                _ => Err(DataError::Format(format!("bad bbox line {line:?}"))),
            }
        })
        .collect()
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {} {}\n", b.class_id, b.x0, b.y0, b.x1, b.y1))
        .collect()
}

pub fn write_video(dir: &Path, video: &Video) -> Result<()> {
    video.validate()?;
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let meta = VideoMeta {
        name: video.name.clone(),
        num_classes: video.num_classes,
        num_frames: video.len(),
        width: video.width(),
        height: video.height(),
    };
    super::write_json(&dir.join("video.json"), &meta)?;
    for (t, frame) in video.frames.iter().enumerate() {
        write_frame(&frame_path(dir, t), frame)?;
        if let Some(m) = &video.masks[t] {
            write_mask(&mask_path(dir, t), m)?;
        }
        if let Some(p) = &video.parts[t] {
            write_mask(&parts_path(dir, t), p)?;
        }
    }
    if let Some(boxes) = &video.boxes {
        let p = bbox_path(dir);
        fs::write(&p, format_boxes(boxes)).map_err(|e| DataError::io(&p, e))?;
    }
    Ok(())
}

/// Loads a video directory. Without `video.json` the class count is taken
/// from the largest label in the frame-0 mask (or boxes).
pub fn read_video(dir: &Path) -> Result<Video> {
    if !dir.is_dir() {
        return Err(DataError::Missing(dir.to_path_buf()));
    }
    let meta_path = dir.join("video.json");
    let meta: Option<VideoMeta> = meta_path.exists().then(|| super::read_json(&meta_path)).transpose()?;
    let mut frames = Vec::new();
    while frame_path(dir, frames.len()).exists() {
        frames.push(read_frame(&frame_path(dir, frames.len()))?);
    }
    if frames.is_empty() {
        return Err(DataError::Missing(frame_path(dir, 0)));
    }
    if let Some(m) = &meta {
        if m.num_frames != frames.len() {
            return Err(DataError::Inconsistent(format!(
                "{}: video.json lists {} frames, found {}",
                dir.display(),
                m.num_frames,
                frames.len()
            )));
        }
    }
    let boxes = {
        let p = bbox_path(dir);
        if p.exists() {
            Some(parse_boxes(&fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?)?)
        } else {
            None
        }
    };
    let declared = meta.as_ref().map(|m| m.num_classes);
    let read_opt = |p: PathBuf, classes: Option<usize>| p.exists().then(|| read_mask(&p, classes)).transpose();
    let first = read_opt(mask_path(dir, 0), declared)?;
    let num_classes = declared.unwrap_or_else(|| {
        let from_mask = first.as_ref().map_or(0, |m| m.max_label() as usize);
        let from_boxes = boxes.iter().flatten().map(|b| b.class_id as usize).max().unwrap_or(0);
        from_mask.max(from_boxes)
    });
    let mut masks = vec![first];
    for t in 1..frames.len() {
        masks.push(read_opt(mask_path(dir, t), Some(num_classes))?);
    }
    let parts = (0..frames.len())
        .map(|t| read_opt(parts_path(dir, t), None))
        .collect::<Result<Vec<_>>>()?;
    let name = meta.map(|m| m.name).unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into())
    });
    let video = Video {
        name,
        frames,
        masks,
        parts,
        num_classes,
        boxes,
    };
    video.validate()?;
    Ok(video)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    /// Directory relative to the manifest.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub num_frames: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn read(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        if !p.exists() {
            return Err(DataError::Missing(p));
        }
        super::read_json(&p)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        super::write_json(&Self::path(root), self)
    }

    pub fn splits(&self) -> Vec<String> {
        let mut s: Vec<String> = self.videos.iter().filter_map(|v| v.split.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Loads the videos of a dataset root, optionally restricted to one split.
/// Manifest entries without a split belong to every split. A directory
/// without a manifest is read as a single video.
pub fn load_dataset(root: &Path, split: Option<&str>) -> Result<Vec<Video>> {
    if !root.exists() {
        return Err(DataError::Missing(root.to_path_buf()));
    }
    if !Manifest::path(root).exists() {
        return Ok(vec![read_video(root)?]);
    }
    let manifest = Manifest::read(root)?;
    manifest
        .videos
        .iter()
        .filter(|v| split.is_none() || v.split.is_none() || v.split.as_deref() == split)
        .map(|v| read_video(&root.join(&v.path)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_video() -> Video {
        let frames = (0..3).map(|t| Frame::filled(4, 3, [t as u8 * 40, 10, 200])).collect();
        let mask = LabelMap::from_fn(4, 3, |x, _| u8::from(x >= 2));
        Video {
            name: "tiny".into(),
            frames,
            masks: vec![Some(mask.clone()), None, Some(mask.clone())],
            parts: vec![Some(mask), None, None],
            num_classes: 1,
            boxes: Some(vec![BBox {
                class_id: 1,
                x0: 2,
                y0: 0,
                x1: 3,
                y1: 2,
            }]),
        }
    }

    #[test]
    fn video_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny_video();
        write_video(dir.path(), &v).unwrap();
        assert_eq!(read_video(dir.path()).unwrap(), v);
    }

    #[test]
    fn class_count_inferred_without_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny_video();
        write_video(dir.path(), &v).unwrap();
        fs::remove_file(dir.path().join("video.json")).unwrap();
        let back = read_video(dir.path()).unwrap();
        assert_eq!(back.num_classes, 1);
        assert_eq!(back.name, dir.path().file_name().unwrap().to_string_lossy());
    }

    #[test]
    fn bbox_lines_parse() {
        let boxes = parse_boxes("1 0 0 3 4\n\n2 5 6 7 8\n").unwrap();
        assert_eq!(
            boxes[1],
            BBox {
                class_id: 2,
                x0: 5,
                y0: 6,
                x1: 7,
                y1: 8
            }
        );
        assert!(parse_boxes("1 4 0 3 4").is_err());
        assert!(parse_boxes("1 0 0 3").is_err());
        assert_eq!(format_boxes(&boxes), "1 0 0 3 4\n2 5 6 7 8\n");
    }

    #[test]
    fn tight_box_around_class() {
        let m = LabelMap::from_fn(5, 5, |x, y| u8::from((1..=3).contains(&x) && y == 2));
        assert_eq!(
            BBox::around(&m, 1),
            Some(BBox {
                class_id: 1,
                x0: 1,
                y0: 2,
                x1: 3,
                y1: 2
            })
        );
        assert_eq!(BBox::around(&m, 2), None);
    }

    #[test]
    fn missing_directory_is_reported() {
        assert!(matches!(
            read_video(Path::new("/nonexistent/vwv")),
            Err(DataError::Missing(_))
        ));
    }
}
