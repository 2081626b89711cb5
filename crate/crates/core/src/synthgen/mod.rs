//! Deterministic synthetic surveillance video with exact box annotations.
//!
//! Objects are flat-colored, textured rectangles or ellipses that follow a
//! piecewise-constant-velocity schedule over a textured static background.
//! Optional flicker regions add unannotated background motion, and per-pixel
//! Gaussian noise is applied last. Frames are quantized to 8 bits per channel
//! when recorded, which makes on-disk round trips exact.

mod dataset;
mod scenes;

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{scenery_change_with_motion, BoundingBox, ObjectAnnotation, SceneryLabel};
use crate::seeds;

pub use dataset::{read_corpus, read_dataset, write_corpus, write_dataset, write_png, AnnotationFile, AnnotationFrame};
pub use scenes::{generate_corpus_configs, mostly_static_scene, CorpusConfig, SuiteConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// Constant velocity (px/frame) applied between frames `start` and `end`.
/// The object moves on frames `start + 1 ..= end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub start: usize,
    pub end: usize,
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub object_id: String,
    pub class_id: u32,
    pub shape: Shape,
    /// Top-left corner at frame 0.
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub color: [f64; 3],
    pub texture_amplitude: f64,
    pub texture_period: f64,
    #[serde(default)]
    pub motion: Vec<MotionSegment>,
}

impl ObjectSpec {
    /// Top-left corner at frame `t`.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let (mut x, mut y) = (self.x, self.y);
        for seg in &self.motion {
            let steps = t.clamp(seg.start, seg.end.max(seg.start)) - seg.start;
            x += seg.velocity[0] * steps as f64;
            y += seg.velocity[1] * steps as f64;
        }
        (x, y)
    }

    pub fn bbox(&self, t: usize) -> Result<BoundingBox> {
        let (x, y) = self.position(t);
        BoundingBox::from_xywh(x, y, self.width, self.height)
    }

    /// True when the object moves between frames `t - 1` and `t`.
    pub fn moves_at(&self, t: usize) -> bool {
        self.motion
            .iter()
            .any(|s| t > s.start && t <= s.end && (s.velocity[0] != 0.0 || s.velocity[1] != 0.0))
    }
}

/// Rectangular background region whose pixels flicker every frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlickerRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Background {
    #[default]
    Static,
    Dynamic { regions: Vec<FlickerRegion> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub background: Background,
    pub background_color: [f64; 3],
    /// Per-pixel Gaussian noise std in intensity units, at most 0.2.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("scene {}: {m}", self.video_id)));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return err("width, height and num_frames must be positive".into());
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return err(format!("noise_sigma {} outside [0, 0.2]", self.noise_sigma));
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.object_id.as_str()) {
                return err(format!("duplicate object id {:?}", o.object_id));
            }
            if !(o.width > 0.0 && o.height > 0.0) {
                return err(format!("object {} has non-positive size", o.object_id));
            }
            if o.texture_period <= 0.0 {
                return err(format!("object {} texture_period must be positive", o.object_id));
            }
            if o.motion.iter().any(|s| s.end < s.start) {
                return err(format!("object {} has a motion segment ending before it starts", o.object_id));
            }
            for t in 0..self.num_frames {
                let (x, y) = o.position(t);
                if !(x >= 0.0 && y >= 0.0 && x + o.width <= self.width as f64 && y + o.height <= self.height as f64) {
                    return err(format!(
                        "object {} leaves the {}x{} canvas at frame {t} (top-left {x:.2}, {y:.2})",
                        o.object_id, self.width, self.height
                    ));
                }
            }
        }
        if let Background::Dynamic { regions } = &self.background {
            for r in regions {
                if r.x1 <= r.x0 || r.y1 <= r.y0 || r.x1 > self.width || r.y1 > self.height || r.amplitude < 0.0 {
                    return err(format!("invalid flicker region {r:?}"));
                }
            }
        }
        Ok(())
    }

    /// Number of frames in which no object moves relative to the previous frame.
    pub fn static_frame_count(&self) -> usize {
        (0..self.num_frames)
            .filter(|&t| t == 0 || !self.objects.iter().any(|o| o.moves_at(t)))
            .count()
    }
}

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} bytes does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Intensity in `[0, 1]`.
    pub fn intensity(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    fn from_float(width: usize, height: usize, buf: &[f64]) -> Self {
        let data = buf.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { width, height, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub image: Image,
    pub annotations: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    /// Present for generated videos; absent for externally converted data.
    pub config: Option<SceneConfig>,
    pub frames: Vec<FrameRecord>,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, index: usize) -> Option<&FrameRecord> {
        self.frames.get(index)
    }
}

fn render_background<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let mut buf = vec![0.0; w * h * 3];
    let phase: [f64; 3] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let fx = rng.gen_range(0.01..0.04);
    let fy = rng.gen_range(0.01..0.04);
    for y in 0..h {
        for x in 0..w {
            let grain: f64 = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                let wave = 0.06 * ((x as f64 * fx + phase[c]).sin() + (y as f64 * fy + phase[(c + 1) % 3]).cos());
                buf[(y * w + x) * 3 + c] = cfg.background_color[c] + wave + grain;
            }
        }
    }
    buf
}

/// Fraction of pixel `[px, px+1) x [py, py+1)` covered by the object's shape.
fn coverage(shape: Shape, b: &BoundingBox, px: usize, py: usize) -> f64 {
    let (x0, y0) = (px as f64, py as f64);
    match shape {
        Shape::Rectangle => {
            let ox = ((x0 + 1.0).min(b.x1()) - x0.max(b.x0())).max(0.0);
            let oy = ((y0 + 1.0).min(b.y1()) - y0.max(b.y0())).max(0.0);
            ox * oy
        }
        Shape::Ellipse => {
            let (cx, cy) = b.center();
            let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
            const N: usize = 4;
            let mut hits = 0;
            for sy in 0..N {
                for sx in 0..N {
                    let dx = (x0 + (sx as f64 + 0.5) / N as f64 - cx) / rx;
                    let dy = (y0 + (sy as f64 + 0.5) / N as f64 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (N * N) as f64
        }
    }
}

fn paint_object(buf: &mut [f64], width: usize, height: usize, o: &ObjectSpec, b: &BoundingBox) {
    let px0 = b.x0().floor().max(0.0) as usize;
    let py0 = b.y0().floor().max(0.0) as usize;
    let px1 = (b.x1().ceil() as usize).min(width);
    let py1 = (b.y1().ceil() as usize).min(height);
    let k = std::f64::consts::TAU / o.texture_period;
    for py in py0..py1 {
        for px in px0..px1 {
            let a = coverage(o.shape, b, px, py);
            if a <= 0.0 {
                continue;
            }
            // texture lives in object coordinates so it moves with the object
            let u = px as f64 + 0.5 - b.x0();
            let v = py as f64 + 0.5 - b.y0();
            let tex = o.texture_amplitude * (k * u).sin() * (k * v).cos();
            let i = (py * width + px) * 3;
            for c in 0..3 {
                let col = o.color[c] + tex;
                buf[i + c] = (1.0 - a) * buf[i + c] + a * col;
            }
        }
    }
}

/// Renders every frame of the scene. Deterministic in `(config, config.seed)`.
pub fn generate_video(config: &SceneConfig) -> Result<SyntheticVideo> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut bg_rng = seeds::rng(seeds::derive(config.seed, 0));
    let background = render_background(config, &mut bg_rng);
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut frames = Vec::with_capacity(config.num_frames);
    for t in 0..config.num_frames {
        let mut rng = seeds::rng(seeds::derive(config.seed, t as u64 + 1));
        let mut buf = background.clone();
        if let Background::Dynamic { regions } = &config.background {
            for r in regions {
                for y in r.y0..r.y1 {
                    for x in r.x0..r.x1 {
                        let delta = r.amplitude * rng.gen_range(-1.0..1.0);
                        let i = (y * w + x) * 3;
                        for c in 0..3 {
                            buf[i + c] += delta;
                        }
                    }
                }
            }
        }
        let mut annotations = Vec::with_capacity(config.objects.len());
        for o in &config.objects {
            let b = o.bbox(t)?;
            paint_object(&mut buf, w, h, o, &b);
            annotations.push(ObjectAnnotation::new(o.object_id.clone(), o.class_id, b));
        }
        if config.noise_sigma > 0.0 {
            for v in buf.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        frames.push(FrameRecord {
            frame_index: t,
            image: Image::from_float(w, h, &buf),
            annotations,
        });
    }
    Ok(SyntheticVideo {
        video_id: config.video_id.clone(),
        width: w,
        height: h,
        config: Some(config.clone()),
        frames,
    })
}

/// A labeled frame pair at a fixed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLabel {
    pub frame_i: usize,
    pub frame_j: usize,
    pub max_mfi: f64,
    pub label: SceneryLabel,
}

/// Labels every pair `(i, i + interval)` of the video from its annotations.
pub fn label_pairs(video: &SyntheticVideo, interval: usize, tau_var: f64) -> Result<Vec<PairLabel>> {
    if interval == 0 {
        return Err(Error::Domain("pair interval must be at least 1".into()));
    }
    if interval >= video.len() {
        return Ok(Vec::new());
    }
    (0..video.len() - interval)
        .map(|i| {
            let j = i + interval;
            let (max_mfi, label) =
                scenery_change_with_motion(&video.frames[i].annotations, &video.frames[j].annotations, tau_var)?;
            Ok(PairLabel {
                frame_i: i,
                frame_j: j,
                max_mfi,
                label,
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn one_object_scene(velocity: [f64; 2], frames: usize, noise: f64) -> SceneConfig {
        SceneConfig {
            video_id: "v".into(),
            width: 64,
            height: 48,
            num_frames: frames,
            objects: vec![ObjectSpec {
                object_id: "o1".into(),
                class_id: 0,
                shape: Shape::Rectangle,
                x: 4.0,
                y: 10.0,
                width: 12.0,
                height: 10.0,
                color: [0.9, 0.2, 0.1],
                texture_amplitude: 0.05,
                texture_period: 6.0,
                motion: vec![MotionSegment {
                    start: 0,
                    end: frames.saturating_sub(1),
                    velocity,
                }],
            }],
            background: Background::Static,
            background_color: [0.3, 0.4, 0.35],
            noise_sigma: noise,
            seed: 5,
        }
    }

    #[test]
    fn static_noiseless_scene_repeats_pixels() {
        let v = generate_video(&one_object_scene([0.0, 0.0], 5, 0.0)).unwrap();
        for f in &v.frames[1..] {
            assert_eq!(f.image, v.frames[0].image);
        }
        let labels = label_pairs(&v, 2, 0.4).unwrap();
        assert!(labels.iter().all(|p| p.label == SceneryLabel::Unchanged && p.max_mfi == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = one_object_scene([1.5, 0.5], 6, 0.05);
        assert_eq!(generate_video(&cfg).unwrap(), generate_video(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(generate_video(&cfg).unwrap().frames[1].image, generate_video(&other).unwrap().frames[1].image);
    }

    #[test]
    fn kinematics_are_exact() {
        let v = generate_video(&one_object_scene([2.0, 0.0], 11, 0.0)).unwrap();
        let x0 = v.frames[0].annotations[0].bbox.x0();
        let x10 = v.frames[10].annotations[0].bbox.x0();
        assert_eq!(x10 - x0, 20.0);
    }

    #[test]
    fn leaving_the_canvas_is_a_config_error() {
        let cfg = one_object_scene([5.0, 0.0], 20, 0.0);
        assert!(matches!(generate_video(&cfg), Err(Error::Config(_))));
        let mut noisy = one_object_scene([0.0, 0.0], 2, 0.0);
        noisy.noise_sigma = 0.3;
        assert!(noisy.validate().is_err());
    }

    #[test]
    fn painted_pixels_stay_inside_the_box() {
        let mut cfg = one_object_scene([0.7, 0.3], 8, 0.0);
        cfg.objects[0].color = [1.0, 1.0, 1.0];
        cfg.objects[0].texture_amplitude = 0.0;
        cfg.objects[0].shape = Shape::Ellipse;
        let mut bg_only = cfg.clone();
        bg_only.objects.clear();
        let v = generate_video(&cfg).unwrap();
        let bg = generate_video(&bg_only).unwrap();
        for (f, b) in v.frames.iter().zip(&bg.frames) {
            let bx = f.annotations[0].bbox;
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let differs = (0..3).any(|c| f.image.intensity(y, x, c) != b.image.intensity(y, x, c));
                    if differs {
                        let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
                        assert!(
                            xc > bx.x0() - 1.0 && xc < bx.x1() + 1.0 && yc > bx.y0() - 1.0 && yc < bx.y1() + 1.0,
                            "pixel ({x}, {y}) painted outside {bx:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn noise_does_not_touch_annotations() {
        let clean = generate_video(&one_object_scene([1.0, 1.0], 6, 0.0)).unwrap();
        let noisy = generate_video(&one_object_scene([1.0, 1.0], 6, 0.15)).unwrap();
        for (a, b) in clean.frames.iter().zip(&noisy.frames) {
            assert_eq!(a.annotations, b.annotations);
        }
    }

    #[test]
    fn teleport_pair_is_fully_changed() {
        let mut cfg = one_object_scene([0.0, 0.0], 4, 0.0);
        cfg.objects[0].motion = vec![MotionSegment {
            start: 1,
            end: 2,
            velocity: [30.0, 0.0],
        }];
        let v = generate_video(&cfg).unwrap();
        let pairs = label_pairs(&v, 1, 0.4).unwrap();
        assert_eq!(pairs[1].max_mfi, 1.0);
        assert_eq!(pairs[1].label, SceneryLabel::Changed);
        assert_eq!(pairs[0].label, SceneryLabel::Unchanged);
    }

    #[test]
    fn drift_to_iou_019_is_changed() {
        // IoU of two w-wide boxes offset by d horizontally is (w - d) / (w + d)
        // so d = w * (1 - 0.19) / 1.19 gives IoU 0.19
        let w = 20.0;
        let d = w * 0.81 / 1.19;
        let mut cfg = one_object_scene([0.0, 0.0], 2, 0.0);
        cfg.objects[0].width = w;
        cfg.objects[0].motion = vec![MotionSegment {
            start: 0,
            end: 1,
            velocity: [d, 0.0],
        }];
        let v = generate_video(&cfg).unwrap();
        let p = label_pairs(&v, 1, 0.4).unwrap()[0];
        assert!((p.max_mfi - 0.81).abs() < 1e-9);
        assert_eq!(p.label, SceneryLabel::Changed);
    }

    #[test]
    fn interval_edge_cases() {
        let v = generate_video(&one_object_scene([0.0, 0.0], 3, 0.0)).unwrap();
        assert!(label_pairs(&v, 3, 0.4).unwrap().is_empty());
        assert!(label_pairs(&v, 0, 0.4).is_err());
    }
}
