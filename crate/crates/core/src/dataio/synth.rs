//! Seeded synthetic videos of textured multi-part objects.
//!
//! Each object is a chain of elliptical parts laid along its local x axis.
//! Objects translate linearly (reflecting off the frame edges) and rotate at a
//! constant rate. Every part has its own hue and a stripe texture in object
//! coordinates; hue drifts linearly with time. The background is a smooth
//! low-saturation colour field with static distractor blobs, and a fixed
//! per-pixel noise pattern is added on top. Masks and part maps come straight
//! from the geometry, so they are exact.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::video::{write_video, BBox, Manifest, ManifestEntry, Video};
use super::{DataError, Result};
use crate::frame::{Frame, LabelMap};

/// Hides `object` (1-based class id) in frames `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub object: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub num_objects: usize,
    pub parts_per_object: usize,
    /// Semi-axes of every part, along and across the object axis, in pixels.
    pub part_axes: [f32; 2],
    /// Upper bound on translation speed, pixels per frame.
    pub max_speed: f32,
    /// Upper bound on rotation rate, radians per frame.
    pub max_rotation: f32,
    /// Hue change per frame, in turns.
    pub drift_rate: f32,
    /// Stripe contrast in `[0, 1]`.
    pub texture: f32,
    /// Per-channel uniform noise amplitude in 8-bit units.
    pub noise: f32,
    pub distractors: usize,
    pub occlusions: Vec<Occlusion>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 24,
            height: 24,
            num_frames: 12,
            num_objects: 1,
            parts_per_object: 2,
            part_axes: [3.5, 2.5],
            max_speed: 0.7,
            max_rotation: 0.1,
            drift_rate: 0.0,
            texture: 0.3,
            noise: 6.0,
            distractors: 2,
            occlusions: Vec::new(),
            seed: 0,
        }
    }
}

/// One elliptical part in frame coordinates (pixel centres sit at `x + 0.5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along `angle`.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct ObjectModel {
    start: [f64; 2],
    velocity: [f64; 2],
    angle: f64,
    spin: f64,
    hues: Vec<f64>,
    saturation: f64,
    value: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    center: [f64; 2],
    radius: f64,
    rgb: [f64; 3],
}

/// Sampled scene parameters; frames are a pure function of this and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    cfg: SynthConfig,
    objects: Vec<ObjectModel>,
    blobs: Vec<Blob>,
    background: [f64; 6],
}

fn part_offsets(cfg: &SynthConfig) -> Vec<f64> {
    let p = cfg.parts_per_object;
    let step = 1.6 * cfg.part_axes[0] as f64;
    (0..p).map(|j| (j as f64 - (p - 1) as f64 / 2.0) * step).collect()
}

/// Largest distance from an object's centre to any of its pixels.
pub fn object_radius(cfg: &SynthConfig) -> f64 {
    let [a, b] = cfg.part_axes;
    let reach = part_offsets(cfg).iter().fold(0.0f64, |m, o| m.max(o.abs()));
    reach + (a.max(b) as f64)
}

/// Triangle wave: `p` bounced between `lo` and `hi`.
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (p - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if self.num_frames == 0 {
            return bad("num_frames must be at least 1");
        }
        if self.num_objects == 0 || self.num_objects > 255 {
            return bad("num_objects must be in 1..=255");
        }
        if self.parts_per_object == 0 || self.parts_per_object > 255 {
            return bad("parts_per_object must be in 1..=255");
        }
        if !(self.part_axes[0] > 0.0 && self.part_axes[1] > 0.0) {
            return bad("part_axes must be positive");
        }
        if !(0.0..=1.0).contains(&self.texture) || self.noise < 0.0 || self.max_speed < 0.0 || self.max_rotation < 0.0 {
            return bad("texture must be in [0, 1]; noise, max_speed and max_rotation non-negative");
        }
        for o in &self.occlusions {
            if o.object == 0 || o.object > self.num_objects || o.start == 0 || o.start > o.end {
                return Err(DataError::Config(format!(
                    "occlusion {o:?} must name an object in 1..={} and satisfy 1 <= start <= end",
                    self.num_objects
                )));
            }
        }
        Ok(())
    }
}

impl Scene {
    /// Samples the scene. Initial placements are retried until every object
    /// shows at least a quarter of its area in frame 0.
    pub fn sample(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let radius = object_radius(cfg);
        let needed = 2.0 * radius;
        if needed > cfg.width.min(cfg.height) as f64 {
            return Err(DataError::ObjectTooLarge {
                object: 1,
                needed: needed as f32,
                width: cfg.width,
                height: cfg.height,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let background = [
            rng.random::<f64>(),
            rng.random::<f64>() * TAU,
            rng.random::<f64>() * TAU,
            rng.random_range(0.8..2.0),
            rng.random_range(0.8..2.0),
            rng.random_range(0.15..0.35),
        ];
        let blobs = (0..cfg.distractors)
            .map(|_| Blob {
                center: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
                radius: rng.random_range(1.5..3.0),
                rgb: hsv_to_rgb(rng.random(), rng.random_range(0.4..0.9), rng.random_range(0.4..0.9)),
            })
            .collect();
        for _ in 0..100 {
            let objects: Vec<ObjectModel> = (0..cfg.num_objects)
                .map(|_| {
                    let speed = rng.random_range(0.0..=cfg.max_speed as f64);
                    let dir = rng.random::<f64>() * TAU;
                    let base = rng.random::<f64>();
                    let p = cfg.parts_per_object;
                    ObjectModel {
                        start: [
                            rng.random_range(radius..=w - radius),
                            rng.random_range(radius..=h - radius),
                        ],
                        velocity: [speed * dir.cos(), speed * dir.sin()],
                        angle: rng.random::<f64>() * TAU,
                        spin: rng.random_range(-(cfg.max_rotation as f64)..=cfg.max_rotation as f64),
                        hues: (0..p)
                            .map(|j| base + (j as f64 + rng.random_range(0.2..0.8)) / p as f64 * 0.8)
                            .collect(),
                        saturation: rng.random_range(0.6..0.95),
                        value: rng.random_range(0.65..0.95),
                    }
                })
                .collect();
            let scene = Scene {
                cfg: cfg.clone(),
                objects,
                blobs: Vec::clone(&blobs),
                background,
            };
            let (mask, _) = scene.labels(0);
            let area = std::f64::consts::PI * cfg.part_axes[0] as f64 * cfg.part_axes[1] as f64;
            if (1..=cfg.num_objects).all(|o| mask.count(o as u8) as f64 >= 0.25 * area) {
                return Ok(scene);
            }
        }
        Err(DataError::Config(
            "could not place every object visibly in frame 0".into(),
        ))
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    fn hidden(&self, object: usize, t: usize) -> bool {
        self.cfg
            .occlusions
            .iter()
            .any(|o| o.object == object + 1 && (o.start..=o.end).contains(&t))
    }

    fn pose(&self, object: usize, t: usize) -> ([f64; 2], f64) {
        let o = &self.objects[object];
        let r = object_radius(&self.cfg);
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let t = t as f64;
        let c = [
            reflect(o.start[0] + o.velocity[0] * t, r, w - r),
            reflect(o.start[1] + o.velocity[1] * t, r, h - r),
        ];
        (c, o.angle + o.spin * t)
    }

    /// Part ellipses of every object at frame `t`; `None` while occluded.
    pub fn geometry(&self, t: usize) -> Vec<Option<Vec<Ellipse>>> {
        let [a, b] = self.cfg.part_axes.map(f64::from);
        (0..self.objects.len())
            .map(|o| {
                if self.hidden(o, t) {
                    return None;
                }
                let (c, ang) = self.pose(o, t);
                Some(
                    part_offsets(&self.cfg)
                        .into_iter()
                        .map(|off| Ellipse {
                            cx: c[0] + off * ang.cos(),
                            cy: c[1] + off * ang.sin(),
                            a,
                            b,
                            angle: ang,
                        })
                        .collect(),
                )
            })
            .collect()
    }

    /// Topmost (object, part, local u) at a point; later objects and lower part indices win.
    fn hit(&self, t: usize, px: f64, py: f64) -> Option<(usize, usize, f64)> {
        let [a, b] = self.cfg.part_axes.map(f64::from);
        let offsets = part_offsets(&self.cfg);
        (0..self.objects.len()).rev().find_map(|o| {
            if self.hidden(o, t) {
                return None;
            }
            let (c, ang) = self.pose(o, t);
            let (dx, dy) = (px - c[0], py - c[1]);
            let u = ang.cos() * dx + ang.sin() * dy;
            let v = -ang.sin() * dx + ang.cos() * dy;
            offsets
                .iter()
                .position(|off| ((u - off) / a).powi(2) + (v / b).powi(2) <= 1.0)
                .map(|j| (o, j, u))
        })
    }

    /// Class mask and part map of frame `t`.
    pub fn labels(&self, t: usize) -> (LabelMap, LabelMap) {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut mask = LabelMap::filled(w, h, 0);
        let mut parts = LabelMap::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                if let Some((o, j, _)) = self.hit(t, x as f64 + 0.5, y as f64 + 0.5) {
                    mask.set(x, y, (o + 1) as u8);
                    parts.set(x, y, (j + 1) as u8);
                }
            }
        }
        (mask, parts)
    }

    fn background_rgb(&self, px: f64, py: f64) -> [f64; 3] {
        let [h0, p1, p2, f1, f2, sat] = self.background;
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let s1 = (TAU * f1 * px / w + p1).sin();
        let s2 = (TAU * f2 * py / h + p2).sin();
        hsv_to_rgb(h0 + 0.12 * s1, sat, 0.45 + 0.15 * s2)
    }

    pub fn render(&self, t: usize) -> Frame {
        let (w, h) = (self.cfg.width, self.cfg.height);
        // Fixed-pattern sensor noise: the same per-pixel offsets in every frame.
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1);
        let drift = self.cfg.drift_rate as f64 * t as f64;
        let texture = self.cfg.texture as f64;
        let noise = self.cfg.noise as f64;
        let mut frame = Frame::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = match self.hit(t, px, py) {
                    Some((o, j, u)) => {
                        let m = &self.objects[o];
                        let stripe = 0.5 * (1.0 + (TAU * u / 3.0).sin());
                        hsv_to_rgb(m.hues[j] + drift, m.saturation, m.value * (1.0 - texture * stripe))
                    }
                    None => self
                        .blobs
                        .iter()
                        .rev()
                        .find(|b| (px - b.center[0]).powi(2) + (py - b.center[1]).powi(2) <= b.radius * b.radius)
                        .map_or_else(|| self.background_rgb(px, py), |b| b.rgb),
                };
                let mut c = [0u8; 3];
                for (ch, v) in c.iter_mut().zip(rgb) {
                    let n = if noise > 0.0 {
                        rng.random_range(-noise..=noise)
                    } else {
                        0.0
                    };
                    *ch = (v * 255.0 + n).round().clamp(0.0, 255.0) as u8;
                }
                frame.set_pixel(x, y, c);
            }
        }
        frame
    }
}

/// Renders a full video. The frame-0 boxes are the tight boxes around each object.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Video> {
    let scene = Scene::sample(cfg)?;
    let mut video = Video {
        name: format!("synth_{}", cfg.seed),
        frames: Vec::with_capacity(cfg.num_frames),
        masks: Vec::with_capacity(cfg.num_frames),
        parts: Vec::with_capacity(cfg.num_frames),
        num_classes: cfg.num_objects,
        boxes: None,
    };
    for t in 0..cfg.num_frames {
        let (mask, parts) = scene.labels(t);
        video.frames.push(scene.render(t));
        video.masks.push(Some(mask));
        video.parts.push(Some(parts));
    }
    let first = video.masks[0].as_ref().expect("frame 0 mask");
    video.boxes = Some(
        (1..=cfg.num_objects)
            .filter_map(|c| BBox::around(first, c as u8))
            .collect(),
    );
    Ok(video)
}

/// A train/test benchmark of independently seeded videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub seed: u64,
    /// Template for every video; its `seed` is replaced per video.
    pub video: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_videos: 20,
            test_videos: 5,
            seed: 0,
            video: SynthConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Seed of video `index` in `split`.
    pub fn video_seed(&self, split: &str, index: usize) -> u64 {
        let lane = if split == "train" { 0 } else { 1u64 << 32 };
        let mut z = self.seed ^ (lane + index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Generates `(train, test)` videos in memory.
    pub fn generate(&self) -> Result<(Vec<Video>, Vec<Video>)> {
        let split = |name: &str, n: usize| -> Result<Vec<Video>> {
            (0..n)
                .map(|i| {
                    let cfg = SynthConfig {
                        seed: self.video_seed(name, i),
                        ..self.video.clone()
                    };
                    let mut v = generate_synthetic(&cfg)?;
                    v.name = format!("{name}_{i:03}");
                    Ok(v)
                })
                .collect()
        };
        Ok((split("train", self.train_videos)?, split("test", self.test_videos)?))
    }
}

/// Writes a benchmark to `out` as `<out>/<split>/<name>/...` plus `manifest.json`.
pub fn generate_dataset(out: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    let (train, test) = cfg.generate()?;
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let mut manifest = Manifest::default();
    for (split, videos) in [("train", &train), ("test", &test)] {
        for v in videos {
            let rel = format!("{split}/{}", v.name);
            write_video(&out.join(&rel), v)?;
            manifest.videos.push(ManifestEntry {
                name: v.name.clone(),
                path: rel,
                split: Some(split.to_string()),
                num_frames: v.len(),
                num_classes: v.num_classes,
            });
        }
    }
    manifest.write(out)?;
    Ok(manifest)
}
