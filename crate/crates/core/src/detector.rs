//! Detection head of the main branch, plus an annotation-driven oracle.
//!
//! The toy head is a dense one-stage grid detector on stage-4 features:
//!
//! ```text
//! conv3x3 C4 -> H, ReLU, depth x (conv3x3 H -> H, ReLU), conv1x1 H -> 5 (+K)
//! channel 0      objectness logit
//! channels 1..2  box centre offset inside the cell (sigmoid)
//! channels 3..4  log(width / cell), log(height / cell)
//! channels 5..   class logits when K > 1 classes
//! ```
//!
//! The cell containing a ground-truth centre is responsible for it. Decoding
//! keeps cells whose objectness clears the score threshold, clamps boxes to
//! the canvas and applies greedy per-class non-maximum suppression.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{normalize_image, stage_shapes, Backbone, BackboneConfig, FeatureMap, NUM_STAGES};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, ObjectAnnotation};
use crate::nn::{join, relu3, relu_backward, sigmoid, zeros_like, Adam, Conv2d, ConvCache, Module, Tensor, TensorKind};
use crate::seeds;
use crate::synthgen::{FrameRecord, SyntheticVideo};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: u32, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, class_id, score })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DetectorKind {
    ToyHead,
    Oracle { jitter_sigma: f64, drop_prob: f64 },
}

impl DetectorKind {
    pub fn validate(&self) -> Result<()> {
        if let DetectorKind::Oracle { jitter_sigma, drop_prob } = *self {
            if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) || !(0.0..1.0).contains(&drop_prob) {
                return Err(Error::Config(format!(
                    "oracle needs jitter_sigma >= 0 and drop_prob in [0, 1), got {jitter_sigma}, {drop_prob}"
                )));
            }
        }
        Ok(())
    }
}

/// Greedy suppression within each class: keep the highest score, drop every
/// remaining box overlapping it by more than `iou_threshold`, repeat.
/// Ties in score keep input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub depth: usize,
    pub num_classes: u32,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            depth: 2,
            num_classes: 1,
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn output_channels(&self) -> usize {
        5 + if self.num_classes > 1 { self.num_classes as usize } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::Config("head needs hidden > 0 and at least one class".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("score_threshold and nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub config: HeadConfig,
    layers: Vec<Conv2d>,
    out: Conv2d,
}

pub struct HeadCache {
    layers: Vec<(ConvCache, Array3<f64>)>,
    out: ConvCache,
}

impl DetectionHead {
    pub fn new<R: Rng>(config: HeadConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = vec![Conv2d::new(in_channels, config.hidden, 3, 1, 1, true, 1.0, rng)];
        for _ in 0..config.depth {
            layers.push(Conv2d::new(config.hidden, config.hidden, 3, 1, 1, true, 1.0, rng));
        }
        let mut out = Conv2d::new(config.hidden, config.output_channels(), 1, 1, 0, true, 0.1, rng);
        // start from a low objectness prior so early training is not flooded with positives
        out.bias.as_mut().expect("bias")[[0]] = -2.0;
        Ok(Self { config, layers, out })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut y = x.clone();
        for l in &self.layers {
            y = relu3(&l.forward(&y));
        }
        self.out.forward(&y)
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, HeadCache) {
        let mut y = x.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (z, c) = l.forward_cached(&y);
            y = relu3(&z);
            layers.push((c, y.clone()));
        }
        let (o, out) = self.out.forward_cached(&y);
        (o, HeadCache { layers, out })
    }

    /// Returns the gradient at the head input.
    pub fn backward(&self, cache: &HeadCache, dout: &Array3<f64>, grad: &mut DetectionHead) -> Array3<f64> {
        let mut d = self.out.backward(&cache.out, dout, &mut grad.out, true).expect("input grad");
        for (k, l) in self.layers.iter().enumerate().rev() {
            relu_backward(&mut d, &cache.layers[k].1);
            d = l.backward(&cache.layers[k].0, &d, &mut grad.layers[k], true).expect("input grad");
        }
        d
    }

    /// Turns the raw output grid into thresholded, suppressed detections.
    pub fn decode(&self, raw: &Array3<f64>, canvas: (usize, usize)) -> Vec<Detection> {
        let (_, gh, gw) = raw.dim();
        let cell_w = canvas.0 as f64 / gw as f64;
        let cell_h = canvas.1 as f64 / gh as f64;
        let mut dets = Vec::new();
        for gy in 0..gh {
            for gx in 0..gw {
                let score = sigmoid(raw[[0, gy, gx]]);
                if score < self.config.score_threshold {
                    continue;
                }
                let cx = (gx as f64 + sigmoid(raw[[1, gy, gx]])) * cell_w;
                let cy = (gy as f64 + sigmoid(raw[[2, gy, gx]])) * cell_h;
                let w = raw[[3, gy, gx]].clamp(-8.0, 8.0).exp() * cell_w;
                let h = raw[[4, gy, gx]].clamp(-8.0, 8.0).exp() * cell_h;
                let Ok(b) = BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0) else {
                    continue;
                };
                let Some(b) = b.clamp_to(canvas.0 as f64, canvas.1 as f64) else {
                    continue;
                };
                let class_id = if self.config.num_classes > 1 {
                    (0..self.config.num_classes as usize)
                        .max_by(|&a, &c| raw[[5 + a, gy, gx]].partial_cmp(&raw[[5 + c, gy, gx]]).unwrap())
                        .unwrap_or(0) as u32
                } else {
                    0
                };
                dets.push(Detection { bbox: b, class_id, score });
            }
        }
        nms(&dets, self.config.nms_iou)
    }
}

impl Module for DetectionHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{k}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{k}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Ground-truth boxes with Gaussian corner jitter and Bernoulli drops.
/// The perturbation of a frame depends only on `(frame_index, seed)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDetector {
    pub jitter_sigma: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl OracleDetector {
    pub fn detect(&self, frame: &FrameRecord) -> Result<DetectionSet> {
        DetectorKind::Oracle {
            jitter_sigma: self.jitter_sigma,
            drop_prob: self.drop_prob,
        }
        .validate()?;
        let mut rng = seeds::rng(seeds::derive(seeds::derive_named(self.seed, "oracle"), frame.frame_index as u64));
        let normal = Normal::new(0.0, self.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let (w, h) = (frame.image.width as f64, frame.image.height as f64);
        let mut detections = Vec::new();
        for a in &frame.annotations {
            // draw every random number even for dropped boxes so one object's fate never shifts another's
            let keep = !rng.gen_bool(self.drop_prob);
            let mut c = a.bbox.to_array();
            if self.jitter_sigma > 0.0 {
                for v in c.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            if !keep {
                continue;
            }
            let (x0, x1) = (c[0].min(c[2]), c[0].max(c[2]));
            let (y0, y1) = (c[1].min(c[3]), c[1].max(c[3]));
            let clamped = BoundingBox::new(x0, y0, x1, y1).ok().and_then(|b| b.clamp_to(w, h));
            if let Some(bbox) = clamped {
                detections.push(Detection {
                    bbox,
                    class_id: a.class_id,
                    score: 1.0,
                });
            }
        }
        Ok(DetectionSet {
            frame_index: frame.frame_index,
            detections,
        })
    }
}

/// Either detector behind one call.
#[derive(Debug, Clone)]
pub enum Detector {
    Toy(DetectionHead),
    Oracle(OracleDetector),
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Toy(_) => DetectorKind::ToyHead,
            Detector::Oracle(o) => DetectorKind::Oracle {
                jitter_sigma: o.jitter_sigma,
                drop_prob: o.drop_prob,
            },
        }
    }

    pub fn needs_features(&self) -> bool {
        matches!(self, Detector::Toy(_))
    }

    pub fn detect(&self, frame: &FrameRecord, stage4: Option<&FeatureMap>) -> Result<DetectionSet> {
        match self {
            Detector::Toy(head) => {
                let f = stage4.ok_or_else(|| Error::Contract("toy head needs stage-4 features".into()))?;
                if f.stage != NUM_STAGES || f.channels() != head.in_channels() {
                    return Err(Error::Shape(format!(
                        "toy head expects stage-{NUM_STAGES} features with {} channels, got stage {} with {}",
                        head.in_channels(),
                        f.stage,
                        f.channels()
                    )));
                }
                let raw = head.forward(&f.values);
                Ok(DetectionSet {
                    frame_index: frame.frame_index,
                    detections: head.decode(&raw, (frame.image.width, frame.image.height)),
                })
            }
            Detector::Oracle(o) => o.detect(frame),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Optimizer steps; each averages `batch_size` frames.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of positive cells in the objectness loss.
    pub positive_weight: f64,
    pub box_weight: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            positive_weight: 5.0,
            box_weight: 2.0,
            seed: 0,
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorStep {
    pub step: usize,
    pub loss: f64,
}

struct CellTarget {
    gx: usize,
    gy: usize,
    offset: [f64; 2],
    log_size: [f64; 2],
    class_id: u32,
}

fn cell_targets(anns: &[ObjectAnnotation], grid: (usize, usize), canvas: (usize, usize)) -> Vec<CellTarget> {
    let cell_w = canvas.0 as f64 / grid.1 as f64;
    let cell_h = canvas.1 as f64 / grid.0 as f64;
    let mut by_area: Vec<&ObjectAnnotation> = anns.iter().collect();
    by_area.sort_by(|a, b| b.bbox.area().partial_cmp(&a.bbox.area()).unwrap());
    let mut out: Vec<CellTarget> = Vec::new();
    for a in by_area {
        let (cx, cy) = a.bbox.center();
        let gx = ((cx / cell_w) as usize).min(grid.1 - 1);
        let gy = ((cy / cell_h) as usize).min(grid.0 - 1);
        // one object per cell; the larger one wins
        if out.iter().any(|t| t.gx == gx && t.gy == gy) {
            continue;
        }
        out.push(CellTarget {
            gx,
            gy,
            offset: [
                (cx / cell_w - gx as f64).clamp(1e-3, 1.0 - 1e-3),
                (cy / cell_h - gy as f64).clamp(1e-3, 1.0 - 1e-3),
            ],
            log_size: [(a.bbox.width() / cell_w).ln(), (a.bbox.height() / cell_h).ln()],
            class_id: a.class_id,
        });
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss of one frame's raw output and its gradient.
fn head_loss(raw: &Array3<f64>, targets: &[CellTarget], cfg: &DetectorTrainConfig) -> (f64, Array3<f64>) {
    let (_, gh, gw) = raw.dim();
    let norm = (gh * gw) as f64;
    let mut grad = Array3::zeros(raw.dim());
    let mut loss = 0.0;
    let mut positive = vec![false; gh * gw];
    for t in targets {
        positive[t.gy * gw + t.gx] = true;
    }
    for gy in 0..gh {
        for gx in 0..gw {
            let o = raw[[0, gy, gx]];
            let (target, w) = if positive[gy * gw + gx] { (1.0, cfg.positive_weight) } else { (0.0, 1.0) };
            loss += w * (softplus(o) - target * o) / norm;
            grad[[0, gy, gx]] = w * (sigmoid(o) - target) / norm;
        }
    }
    let k = cfg.head.num_classes as usize;
    for t in targets {
        let (gx, gy) = (t.gx, t.gy);
        for a in 0..2 {
            let s = sigmoid(raw[[1 + a, gy, gx]]);
            let e = s - t.offset[a];
            loss += cfg.box_weight * e * e / norm;
            grad[[1 + a, gy, gx]] = cfg.box_weight * 2.0 * e * s * (1.0 - s) / norm;
            let e = raw[[3 + a, gy, gx]] - t.log_size[a];
            loss += cfg.box_weight * e * e / norm;
            grad[[3 + a, gy, gx]] = cfg.box_weight * 2.0 * e / norm;
        }
        if k > 1 {
            let logits: Vec<f64> = (0..k).map(|c| raw[[5 + c, gy, gx]]).collect();
            let p = crate::nn::softmax(&logits);
            loss -= p[t.class_id as usize].max(f64::MIN_POSITIVE).ln() / norm;
            for c in 0..k {
                grad[[5 + c, gy, gx]] = (p[c] - if c == t.class_id as usize { 1.0 } else { 0.0 }) / norm;
            }
        }
    }
    (loss, grad)
}

/// Jointly trains a backbone and toy head on annotated frames; both are
/// frozen afterwards. Deterministic given the config seed.
pub fn train_toy_detector(
    videos: &[SyntheticVideo],
    config: &DetectorTrainConfig,
) -> Result<(Backbone, DetectionHead, Vec<DetectorStep>)> {
    config.backbone.validate()?;
    config.head.validate()?;
    if config.steps == 0 || config.batch_size == 0 || config.learning_rate <= 0.0 {
        return Err(Error::Config("steps, batch_size and learning_rate must be positive".into()));
    }
    let n = config.backbone.input_size;
    let frames: Vec<&FrameRecord> = videos.iter().flat_map(|v| v.frames.iter()).collect();
    if frames.iter().all(|f| f.annotations.is_empty()) {
        return Err(Error::Config("detector training needs at least one annotated object".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.image.width != n || f.image.height != n) {
        return Err(Error::Config(format!(
            "frame {} is {}x{} but the backbone input is {n}x{n}",
            f.frame_index, f.image.width, f.image.height
        )));
    }
    if let Some(a) = frames.iter().flat_map(|f| &f.annotations).find(|a| a.class_id >= config.head.num_classes) {
        return Err(Error::Config(format!(
            "class_id {} exceeds the head's {} classes",
            a.class_id, config.head.num_classes
        )));
    }

    let mut backbone = Backbone::new(BackboneConfig {
        seed: seeds::derive_named(config.seed, "detector-backbone"),
        ..config.backbone.clone()
    })?;
    let mut rng = seeds::rng(seeds::derive_named(config.seed, "detector"));
    let c4 = config.backbone.channels(NUM_STAGES);
    let mut head = DetectionHead::new(config.head, c4, &mut rng)?;
    let (_, gh, gw) = stage_shapes(&config.backbone)[NUM_STAGES - 1];
    let mut opt_b = Adam::new(config.learning_rate);
    let mut opt_h = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut gb = zeros_like(&backbone);
        let mut gh_ = zeros_like(&head);
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            let f = frames[rng.gen_range(0..frames.len())];
            let x = normalize_image(&f.image);
            let (feat, bcache) = backbone.forward_train(&x)?;
            let (raw, hcache) = head.forward_train(&feat);
            let targets = cell_targets(&f.annotations, (gh, gw), (n, n));
            let (loss, mut draw) = head_loss(&raw, &targets, config);
            draw.mapv_inplace(|v| v / config.batch_size as f64);
            total += loss;
            let dfeat = head.backward(&hcache, &draw, &mut gh_);
            backbone.backward(&bcache, &dfeat, &mut gb);
        }
        opt_b.step(&mut backbone, &gb);
        opt_h.step(&mut head, &gh_);
        let loss = total / config.batch_size as f64;
        log::debug!("detector step {step}: loss {loss:.5}");
        history.push(DetectorStep { step, loss });
    }
    Ok((backbone, head, history))
}

/// Runs the detector on every frame independently: the per-frame baseline.
pub fn detect_video(
    detector: &Detector,
    backbone: Option<&Backbone>,
    video: &SyntheticVideo,
) -> Result<Vec<DetectionSet>> {
    video
        .frames
        .iter()
        .map(|f| {
            let feat = match (detector.needs_features(), backbone) {
                (true, Some(b)) => Some(b.forward_full(&f.image)?),
                (true, None) => return Err(Error::Contract("toy head needs a backbone".into())),
                (false, _) => None,
            };
            detector.detect(f, feat.as_ref())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame: usize,
    pub class_id: u32,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// One line per detection.
pub fn write_detections(path: &Path, video_id: &str, sets: &[DetectionSet]) -> Result<()> {
    let mut out = Vec::new();
    for s in sets {
        for d in &s.detections {
            serde_json::to_writer(
                &mut out,
                &DetectionRecord {
                    video_id: video_id.to_string(),
                    frame: s.frame_index,
                    class_id: d.class_id,
                    score: d.score,
                    bbox: d.bbox,
                },
            )?;
            out.push(b'\n');
        }
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a detection dump, grouping records by video and frame. Frames of a
/// video without any record come back as empty sets up to `frames_per_video`.
pub fn read_detections(
    path: &Path,
    frames_per_video: &std::collections::BTreeMap<String, usize>,
) -> Result<std::collections::BTreeMap<String, Vec<DetectionSet>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: std::collections::BTreeMap<String, Vec<DetectionSet>> = frames_per_video
        .iter()
        .map(|(v, &n)| {
            (
                v.clone(),
                (0..n)
                    .map(|i| DetectionSet {
                        frame_index: i,
                        detections: Vec::new(),
                    })
                    .collect(),
            )
        })
        .collect();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::schema(path, format!("line {}: {e}", n + 1)))?;
        let sets = out
            .get_mut(&r.video_id)
            .ok_or_else(|| Error::schema(path, format!("line {}: unknown video {:?}", n + 1, r.video_id)))?;
        let set = sets
            .get_mut(r.frame)
            .ok_or_else(|| Error::schema(path, format!("line {}: frame {} out of range", n + 1, r.frame)))?;
        set.detections.push(Detection::new(r.bbox, r.class_id, r.score)?);
    }
    Ok(out)
}

/// Saved feature-network and head parameters.
pub fn save_detector(path: &Path, backbone: &Backbone, head: &DetectionHead) -> Result<()> {
    let meta = serde_json::json!({
        "backbone": backbone.config(),
        "head": head.config,
    });
    crate::nn::write_checkpoint(path, &[("backbone", backbone), ("head", head)], meta)
}

pub fn load_detector(path: &Path) -> Result<(Backbone, DetectionHead)> {
    let ck = crate::nn::read_checkpoint(path)?;
    let bad = |m: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m,
    };
    let bcfg: BackboneConfig =
        serde_json::from_value(ck.meta["backbone"].clone()).map_err(|e| bad(format!("backbone config: {e}")))?;
    let hcfg: HeadConfig = serde_json::from_value(ck.meta["head"].clone()).map_err(|e| bad(format!("head config: {e}")))?;
    let mut backbone = Backbone::zeros(bcfg.clone())?;
    let mut rng = seeds::rng(0);
    let mut head = DetectionHead::new(hcfg, bcfg.channels(NUM_STAGES), &mut rng)?;
    ck.load_into("backbone", &mut backbone)?;
    ck.load_into("head", &mut head)?;
    Ok((backbone, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StageSpec;
    use crate::nn::state_digest;
    use crate::synthgen::{generate_video, Background, MotionSegment, ObjectSpec, SceneConfig, Shape};

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn frame_with(anns: Vec<ObjectAnnotation>, index: usize) -> FrameRecord {
        FrameRecord {
            frame_index: index,
            image: crate::synthgen::Image::zeros(64, 64),
            annotations: anns,
        }
    }

    #[test]
    fn identity_oracle_returns_annotations() {
        let anns = vec![
            ObjectAnnotation::new("a", 0, bx(1.0, 2.0, 10.0, 20.0)),
            ObjectAnnotation::new("b", 2, bx(30.0, 30.0, 50.5, 41.0)),
        ];
        let o = OracleDetector {
            jitter_sigma: 0.0,
            drop_prob: 0.0,
            seed: 3,
        };
        let d = o.detect(&frame_with(anns.clone(), 4)).unwrap();
        assert_eq!(d.frame_index, 4);
        assert_eq!(d.detections.len(), 2);
        for (det, a) in d.detections.iter().zip(&anns) {
            assert_eq!(det.bbox, a.bbox);
            assert_eq!(det.class_id, a.class_id);
            assert_eq!(det.score, 1.0);
        }
    }

    #[test]
    fn oracle_is_deterministic_per_frame_and_seed() {
        let anns = vec![ObjectAnnotation::new("a", 0, bx(10.0, 10.0, 30.0, 30.0))];
        let o = OracleDetector {
            jitter_sigma: 2.0,
            drop_prob: 0.3,
            seed: 9,
        };
        let f = frame_with(anns, 17);
        assert_eq!(o.detect(&f).unwrap(), o.detect(&f).unwrap());
        let other = OracleDetector { seed: 10, ..o };
        let differs = (0..20).any(|i| {
            let f = frame_with(f.annotations.clone(), i);
            o.detect(&f).unwrap() != other.detect(&f).unwrap()
        });
        assert!(differs);
    }

    #[test]
    fn oracle_drop_frequency_within_binomial_band() {
        let p = 0.999;
        let o = OracleDetector {
            jitter_sigma: 0.0,
            drop_prob: p,
            seed: 1,
        };
        let anns = vec![ObjectAnnotation::new("a", 0, bx(10.0, 10.0, 30.0, 30.0))];
        let n = 1000;
        let empty = (0..n)
            .filter(|&i| o.detect(&frame_with(anns.clone(), i)).unwrap().detections.is_empty())
            .count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((empty - n as f64 * p).abs() <= 3.0 * sd.max(1.0), "{empty} empty of {n}");
    }

    #[test]
    fn oracle_rejects_bad_parameters() {
        let o = OracleDetector {
            jitter_sigma: 0.0,
            drop_prob: 1.0,
            seed: 1,
        };
        assert!(matches!(o.detect(&frame_with(vec![], 0)), Err(Error::Config(_))));
    }

    #[test]
    fn nms_keeps_best_and_is_idempotent() {
        let d = |b: BoundingBox, s: f64, c: u32| Detection { bbox: b, class_id: c, score: s };
        let dets = vec![
            d(bx(0.0, 0.0, 10.0, 10.0), 0.8, 0),
            d(bx(1.0, 0.0, 11.0, 10.0), 0.9, 0),
            d(bx(1.0, 0.0, 11.0, 10.0), 0.7, 1),
            d(bx(50.0, 50.0, 60.0, 60.0), 0.6, 0),
        ];
        let once = nms(&dets, 0.5);
        assert_eq!(once.len(), 3);
        assert_eq!(once[0].score, 0.9);
        assert_eq!(nms(&once, 0.5), once);
    }

    #[test]
    fn toy_head_requires_features() {
        let mut rng = seeds::rng(1);
        let head = DetectionHead::new(HeadConfig::default(), 8, &mut rng).unwrap();
        let det = Detector::Toy(head);
        assert!(matches!(det.detect(&frame_with(vec![], 0), None), Err(Error::Contract(_))));
    }

    #[test]
    fn decode_emits_valid_clamped_boxes() {
        let mut rng = seeds::rng(2);
        let head = DetectionHead::new(
            HeadConfig {
                hidden: 4,
                depth: 0,
                ..Default::default()
            },
            2,
            &mut rng,
        )
        .unwrap();
        let mut raw = Array3::zeros((5, 2, 2));
        raw.index_axis_mut(ndarray::Axis(0), 0).fill(-5.0);
        raw[[0, 1, 1]] = 5.0;
        raw[[3, 1, 1]] = 2.0; // wide box running off the canvas
        let dets = head.decode(&raw, (64, 64));
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert!(b.x0() >= 0.0 && b.x1() <= 64.0 && b.y1() <= 64.0);
        assert_eq!((b.x1() - 64.0).abs(), 0.0);
        assert!((dets[0].score - sigmoid(5.0)).abs() < 1e-15);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = seeds::rng(3);
        let cfg = DetectorTrainConfig {
            head: HeadConfig {
                hidden: 3,
                depth: 1,
                num_classes: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let head = DetectionHead::new(cfg.head, 2, &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((2, 3, 3), || rng.gen_range(-1.0..1.0));
        let anns = vec![ObjectAnnotation::new("a", 2, bx(3.0, 4.0, 20.0, 14.0))];
        let targets = cell_targets(&anns, (3, 3), (24, 24));
        let (raw, cache) = head.forward_train(&x);
        let (_, dout) = head_loss(&raw, &targets, &cfg);
        let mut g = zeros_like(&head);
        let dx = head.backward(&cache, &dout, &mut g);
        let loss_x = |x: &Array3<f64>| head_loss(&head.forward(x), &targets, &cfg).0;
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 1, 2], [0, 2, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss_x(&xp) - loss_x(&xm)) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-6 * num.abs().max(1.0), "{num} vs {}", dx[idx]);
        }
    }

    fn tiny_scene() -> SceneConfig {
        SceneConfig {
            video_id: "t".into(),
            width: 32,
            height: 32,
            num_frames: 6,
            objects: vec![ObjectSpec {
                object_id: "o".into(),
                class_id: 0,
                shape: Shape::Rectangle,
                x: 2.0,
                y: 4.0,
                width: 10.0,
                height: 12.0,
                color: [0.9, 0.9, 0.1],
                texture_amplitude: 0.0,
                texture_period: 5.0,
                motion: vec![MotionSegment {
                    start: 0,
                    end: 5,
                    velocity: [3.0, 1.0],
                }],
            }],
            background: Background::Static,
            background_color: [0.2, 0.2, 0.3],
            noise_sigma: 0.0,
            seed: 1,
        }
    }

    fn tiny_train_config() -> DetectorTrainConfig {
        DetectorTrainConfig {
            backbone: BackboneConfig {
                input_size: 32,
                stages: [2, 4, 4, 8].iter().map(|&channels| StageSpec { channels, blocks: 1 }).collect(),
                seed: 0,
            },
            head: HeadConfig {
                hidden: 8,
                depth: 1,
                ..Default::default()
            },
            steps: 40,
            batch_size: 2,
            learning_rate: 3e-3,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let v = generate_video(&tiny_scene()).unwrap();
        let cfg = tiny_train_config();
        let (b1, h1, hist) = train_toy_detector(std::slice::from_ref(&v), &cfg).unwrap();
        let (b2, h2, _) = train_toy_detector(std::slice::from_ref(&v), &cfg).unwrap();
        assert_eq!(state_digest(&b1), state_digest(&b2));
        assert_eq!(state_digest(&h1), state_digest(&h2));
        let head_avg: f64 = hist[..5].iter().map(|s| s.loss).sum::<f64>() / 5.0;
        let tail_avg: f64 = hist[hist.len() - 5..].iter().map(|s| s.loss).sum::<f64>() / 5.0;
        assert!(tail_avg < head_avg, "{head_avg} -> {tail_avg}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.ckpt");
        save_detector(&p, &b1, &h1).unwrap();
        let (b3, h3) = load_detector(&p).unwrap();
        assert_eq!(state_digest(&b1), state_digest(&b3));
        assert_eq!(state_digest(&h1), state_digest(&h3));
    }

    #[test]
    fn training_without_objects_is_a_config_error() {
        let mut s = tiny_scene();
        s.objects.clear();
        let v = generate_video(&s).unwrap();
        assert!(matches!(train_toy_detector(&[v], &tiny_train_config()), Err(Error::Config(_))));
    }

    #[test]
    fn detection_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let sets = vec![
            DetectionSet {
                frame_index: 0,
                detections: vec![Detection::new(bx(1.0, 1.0, 5.0, 5.0), 0, 0.75).unwrap()],
            },
            DetectionSet {
                frame_index: 1,
                detections: vec![],
            },
        ];
        write_detections(&p, "v", &sets).unwrap();
        let map = [("v".to_string(), 2usize)].into_iter().collect();
        let back = read_detections(&p, &map).unwrap();
        assert_eq!(back["v"], sets);
    }
}
