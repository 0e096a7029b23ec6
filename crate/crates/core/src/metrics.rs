//! Region similarity J, boundary F, J decay and the part-consistency score.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{load_dataset, mask_path, read_mask, DataError, Video};
use crate::dictionary::Dictionary;
use crate::encoder::{encode_frame, EncoderError, EncoderParams};
use crate::frame::LabelMap;
use crate::matcher::{best_word_of_class, word_posteriors, MatchError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("j_decay needs at least 4 frames, got {0}")]
    TooFewFrames(usize),
    #[error("{video}: {found} predicted frames for {expected} ground-truth frames")]
    MissingFrames {
        video: String,
        expected: usize,
        found: usize,
    },
    #[error("{video}: predicted label {label} exceeds the class count {num_classes}")]
    LabelMismatch {
        video: String,
        label: u8,
        num_classes: usize,
    },
    #[error("no annotated frames to score")]
    NoAnnotatedFrames,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_extent(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.same_extent(gt) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )))
    }
}

/// Intersection over union of `class`; 1.0 when both are empty.
pub fn iou(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f32> {
    check_extent(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p == class, g == class);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f32 / union as f32 })
}

/// Pixels of `class` with an in-frame 4-neighbour outside it. The frame edge is not a boundary.
pub fn boundary(mask: &LabelMap, class: u8) -> Vec<bool> {
    let (w, h) = (mask.width, mask.height);
    (0..mask.len())
        .map(|p| {
            if mask.labels[p] != class {
                return false;
            }
            let (x, y) = (p % w, p / w);
            [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ]
            .into_iter()
            .flatten()
            .any(|q| mask.labels[q] != class)
        })
        .collect()
}

/// Chebyshev dilation of a boolean grid by `radius`.
fn dilate(set: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; set.len()];
    for y in 0..h {
        for x in 0..w {
            if set[y * w + x] {
                for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    rows[y * w + xx] = true;
                }
            }
        }
    }
    let mut out = vec![false; set.len()];
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] {
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    out[yy * w + x] = true;
                }
            }
        }
    }
    out
}

/// Default boundary tolerance: 0.8% of the frame diagonal, rounded up.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    (0.008 * ((width * width + height * height) as f64).sqrt()).ceil() as usize
}

/// Boundary F-measure of `class` with a Chebyshev matching radius.
pub fn boundary_f(pred: &LabelMap, gt: &LabelMap, class: u8, tolerance: usize) -> Result<f32> {
    check_extent(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    let pb = boundary(pred, class);
    let gb = boundary(gt, class);
    let (np, ng) = (pb.iter().filter(|&&b| b).count(), gb.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let near_gt = dilate(&gb, w, h, tolerance);
    let near_pred = dilate(&pb, w, h, tolerance);
    let precision = pb.iter().zip(&near_gt).filter(|(&b, &n)| b && n).count() as f64 / np as f64;
    let recall = gb.iter().zip(&near_pred).filter(|(&b, &n)| b && n).count() as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / (precision + recall)) as f32)
}

/// Mean of the first temporal quarter minus the mean of the last. Earlier
/// quarters take the remainder when the length is not a multiple of four.
pub fn j_decay(ious: &[f32]) -> Result<f32> {
    let n = ious.len();
    if n < 4 {
        return Err(MetricsError::TooFewFrames(n));
    }
    let (base, rem) = (n / 4, n % 4);
    let first_len = base + usize::from(rem > 0);
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    Ok((mean(&ious[..first_len]) - mean(&ious[n - base..])) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartTally {
    pub consistent: usize,
    pub total: usize,
}

impl PartTally {
    /// Percentage of consistent (frame, word) pairs.
    pub fn score(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.consistent as f64 / self.total as f64
    }
}

impl std::ops::Add for PartTally {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            consistent: self.consistent + rhs.consistent,
            total: self.total + rhs.total,
        }
    }
}

fn majority_parts(words: &[Option<usize>], parts: &LabelMap) -> Vec<(usize, u8)> {
    let mut counts: std::collections::BTreeMap<usize, [usize; 256]> = Default::default();
    for (w, &p) in words.iter().zip(&parts.labels) {
        if let Some(w) = w {
            counts.entry(*w).or_insert([0; 256])[p as usize] += 1;
        }
    }
    counts
        .into_iter()
        .map(|(w, c)| {
            let best = (0..256).fold(0, |b, i| if c[i] > c[b] { i } else { b });
            (w, best as u8)
        })
        .collect()
}

/// Compares each word's majority part in later annotated frames with its
/// majority part in the first annotated frame.
///
/// `word_maps[t][p]` is the word assigned to pixel `p` of frame `t` (or
/// `None`), and `part_maps[t]` the part annotation when available.
pub fn part_consistency(word_maps: &[Vec<Option<usize>>], part_maps: &[Option<LabelMap>]) -> Result<PartTally> {
    let mut annotated = word_maps
        .iter()
        .zip(part_maps)
        .filter_map(|(w, p)| p.as_ref().map(|p| (w, p)));
    let (w0, p0) = annotated.next().ok_or(MetricsError::NoAnnotatedFrames)?;
    if w0.len() != p0.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} words for {} pixels",
            w0.len(),
            p0.len()
        )));
    }
    let reference: std::collections::BTreeMap<usize, u8> = majority_parts(w0, p0).into_iter().collect();
    let mut tally = PartTally::default();
    for (w, p) in annotated {
        if w.len() != p.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} words for {} pixels",
                w.len(),
                p.len()
            )));
        }
        for (word, part) in majority_parts(w, p) {
            if let Some(&r) = reference.get(&word) {
                tally.total += 1;
                tally.consistent += usize::from(r == part);
            }
        }
    }
    Ok(tally)
}

/// Part consistency of `class`'s words over a video: each ground-truth
/// object pixel is assigned the most probable word of that class.
pub fn video_part_tally(params: &EncoderParams, dict: &Dictionary, video: &Video, class: u8) -> Result<PartTally> {
    let mut word_maps = Vec::with_capacity(video.len());
    for (frame, mask) in video.frames.iter().zip(&video.masks) {
        let Some(mask) = mask else {
            word_maps.push(vec![None; frame.width * frame.height]);
            continue;
        };
        let wp = word_posteriors(&encode_frame(params, frame)?, dict)?;
        let best = best_word_of_class(&wp, dict, class);
        word_maps.push(
            best.into_iter()
                .zip(&mask.labels)
                .map(|(w, &l)| if l == class { w } else { None })
                .collect(),
        );
    }
    part_consistency(&word_maps, &video.parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Boundary matching radius in pixels; defaults to 0.8% of the diagonal.
    pub boundary_tolerance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub video: String,
    pub object: u8,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    /// Absent when fewer than four frames were evaluated.
    pub j_decay: Option<f64>,
    /// Per evaluated frame, starting at frame 1.
    pub j_per_frame: Vec<f32>,
    pub f_per_frame: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub objects: Vec<ObjectReport>,
    /// Mean over videos of the per-video mean over objects.
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub j_decay_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_per_frame: Option<f64>,
}

pub const CSV_HEADER: &str = "video,object,J_mean,F_mean,JF_mean,J_decay";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for o in &self.objects {
            let decay = o.j_decay.map_or(String::new(), |d| format!("{d:.6}"));
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{}\n",
                o.video, o.object, o.j_mean, o.f_mean, o.jf_mean, decay
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Predictions and ground truth for one video. Frame 0 is never scored and
/// frames without ground truth are skipped.
pub struct VideoEval<'a> {
    pub name: &'a str,
    pub num_classes: usize,
    pub predictions: &'a [LabelMap],
    pub ground_truth: &'a [Option<LabelMap>],
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate_video(v: &VideoEval<'_>, cfg: &EvalConfig) -> Result<Vec<ObjectReport>> {
    if v.predictions.len() != v.ground_truth.len() {
        return Err(MetricsError::MissingFrames {
            video: v.name.to_string(),
            expected: v.ground_truth.len(),
            found: v.predictions.len(),
        });
    }
    for p in v.predictions {
        if let Some(&label) = p.labels.iter().find(|&&l| l as usize > v.num_classes) {
            return Err(MetricsError::LabelMismatch {
                video: v.name.to_string(),
                label,
                num_classes: v.num_classes,
            });
        }
    }
    let scored: Vec<(&LabelMap, &LabelMap)> = v
        .predictions
        .iter()
        .zip(v.ground_truth)
        .skip(1)
        .filter_map(|(p, g)| g.as_ref().map(|g| (p, g)))
        .collect();
    let mut out = Vec::with_capacity(v.num_classes);
    for class in 1..=v.num_classes as u8 {
        let mut js = Vec::with_capacity(scored.len());
        let mut fs = Vec::with_capacity(scored.len());
        for &(p, g) in &scored {
            let tol = cfg
                .boundary_tolerance
                .unwrap_or_else(|| default_tolerance(g.width, g.height));
            js.push(iou(p, g, class)?);
            fs.push(boundary_f(p, g, class, tol)?);
        }
        let j_mean = mean(js.iter().map(|&j| j as f64));
        let f_mean = mean(fs.iter().map(|&f| f as f64));
        out.push(ObjectReport {
            video: v.name.to_string(),
            object: class,
            j_mean,
            f_mean,
            jf_mean: (j_mean + f_mean) / 2.0,
            j_decay: j_decay(&js).ok().map(f64::from),
            j_per_frame: js,
            f_per_frame: fs,
        });
    }
    Ok(out)
}

/// Scores several videos; the result does not depend on their order.
pub fn evaluate(videos: &[VideoEval<'_>], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut objects = Vec::new();
    for v in videos {
        objects.extend(evaluate_video(v, cfg)?);
    }
    objects.sort_by(|a, b| (&a.video, a.object).cmp(&(&b.video, b.object)));
    let by_video = objects.chunk_by(|a, b| a.video == b.video);
    let per_video: Vec<(f64, f64, Option<f64>)> = by_video
        .map(|objs| {
            let decays: Vec<f64> = objs.iter().filter_map(|o| o.j_decay).collect();
            (
                mean(objs.iter().map(|o| o.j_mean)),
                mean(objs.iter().map(|o| o.f_mean)),
                (!decays.is_empty()).then(|| mean(decays)),
            )
        })
        .collect();
    let j_mean = mean(per_video.iter().map(|v| v.0));
    let f_mean = mean(per_video.iter().map(|v| v.1));
    let decays: Vec<f64> = per_video.iter().filter_map(|v| v.2).collect();
    Ok(EvalReport {
        objects,
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
        j_decay_mean: (!decays.is_empty()).then(|| mean(decays)),
        part_consistency: None,
        seconds_per_frame: None,
    })
}

/// Reads `<pred>/<video>/mask_%05d.pgm` for every video of `split` under `gt`.
pub fn evaluate_run(pred: &Path, gt: &Path, split: Option<&str>, cfg: &EvalConfig) -> Result<EvalReport> {
    let videos = load_dataset(gt, split)?;
    let single = !crate::dataio::Manifest::path(gt).exists();
    let mut predictions = Vec::with_capacity(videos.len());
    for v in &videos {
        let dir = if single && !pred.join(&v.name).is_dir() {
            pred.to_path_buf()
        } else {
            pred.join(&v.name)
        };
        if !dir.is_dir() {
            return Err(DataError::Missing(dir).into());
        }
        let mut maps = Vec::new();
        while mask_path(&dir, maps.len()).exists() {
            maps.push(read_mask(&mask_path(&dir, maps.len()), None)?);
        }
        predictions.push(maps);
    }
    let evals: Vec<VideoEval<'_>> = videos
        .iter()
        .zip(&predictions)
        .map(|(v, p)| VideoEval {
            name: &v.name,
            num_classes: v.num_classes,
            predictions: p,
            ground_truth: &v.masks,
        })
        .collect();
    evaluate(&evals, cfg)
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json() + "\n").map_err(|e| DataError::io(&json, e))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| DataError::io(&csv, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> LabelMap {
        LabelMap::from_fn(w, h, |x, y| u8::from((x0..x1).contains(&x) && (y0..y1).contains(&y)))
    }

    #[test]
    fn iou_examples() {
        let a = block(4, 4, 0, 2, 0, 2);
        let b = block(4, 4, 1, 3, 0, 2);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(iou(&a, &block(4, 4, 2, 4, 2, 4), 1).unwrap(), 0.0);
        assert!((iou(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(iou(&a, &a, 2).unwrap(), 1.0);
    }

    #[test]
    fn boundary_excludes_frame_edge() {
        let m = block(4, 3, 0, 2, 0, 3);
        let b = boundary(&m, 1);
        let cols: Vec<usize> = (0..12).filter(|&p| b[p]).map(|p| p % 4).collect();
        assert_eq!(cols, vec![1, 1, 1]);
    }

    #[test]
    fn straight_edges_match_up_to_tolerance() {
        for tol in 0..4 {
            let gt = block(16, 8, 0, 6, 0, 8);
            let near = block(16, 8, 0, 6 + tol, 0, 8);
            let far = block(16, 8, 0, 7 + tol, 0, 8);
            assert_eq!(boundary_f(&near, &gt, 1, tol).unwrap(), 1.0);
            assert_eq!(boundary_f(&far, &gt, 1, tol).unwrap(), 0.0);
        }
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gt = block(6, 6, 1, 4, 1, 4);
        assert_eq!(boundary_f(&LabelMap::filled(6, 6, 0), &gt, 1, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&gt, &gt, 1, 0).unwrap(), 1.0);
        assert_eq!(boundary_f(&gt, &gt, 2, 0).unwrap(), 1.0);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(j_decay(&[0.7; 9]).unwrap(), 0.0);
        assert_eq!(j_decay(&[1.0, 1.0, 0.5, 0.5]).unwrap(), 0.5);
        assert!(matches!(j_decay(&[1.0; 3]), Err(MetricsError::TooFewFrames(3))));
    }

    #[test]
    fn default_tolerance_follows_diagonal() {
        assert_eq!(default_tolerance(24, 24), 1);
        assert_eq!(default_tolerance(854, 480), 8);
    }

    #[test]
    fn part_consistency_extremes() {
        let parts = LabelMap::from_fn(4, 1, |x, _| 1 + u8::from(x >= 2));
        let words = vec![Some(0), Some(0), Some(1), Some(1)];
        let flipped = vec![Some(1), Some(1), Some(0), Some(0)];
        let p = Some(parts);
        let same = part_consistency(
            &[words.clone(), words.clone(), words.clone()],
            &[p.clone(), p.clone(), p.clone()],
        )
        .unwrap();
        assert_eq!(same.score(), 100.0);
        let moved = part_consistency(&[words, flipped.clone(), flipped], &[p.clone(), p.clone(), p]).unwrap();
        assert_eq!(moved.score(), 0.0);
        assert!(matches!(
            part_consistency(&[vec![]], &[None]),
            Err(MetricsError::NoAnnotatedFrames)
        ));
    }
}
