//! Temporal early-exit inference: per frame, walk the enabled exits in depth
//! order and either reuse the cached detections or run the main branch.
//!
//! Change is measured against the last frame that went through the main branch
//! (the keyframe) by default, so slow drift cannot accumulate unnoticed across
//! a run of reused frames. The sliding policy compares against the previous
//! frame instead.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, NUM_STAGES};
use crate::detector::{DetectionSet, Detector, DetectorKind, HeadConfig};
use crate::error::{Error, Result};
use crate::geometry::{scenery_change, ObjectAnnotation, SceneryLabel};
use crate::metrics::{mac_report, MacReport, RunStats};
use crate::synthgen::{FrameRecord, SyntheticVideo};
use crate::teem::{EntropyBase, Teem, TeemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    Keyframe,
    Sliding,
}

/// What decides reuse: the trained exits, or the annotation-derived label
/// (an analysis mode that isolates classifier error; charged as exit 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Teem,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Entropy threshold, in the unit of `entropy_base`.
    pub gamma: f64,
    /// Threshold the exits were trained for; used by the ground-truth gate.
    pub tau_var: f64,
    pub exits: Vec<usize>,
    pub entropy_base: EntropyBase,
    /// Additionally require the winning probability to reach this value.
    pub min_prob: Option<f64>,
    pub detector: DetectorKind,
    pub reference: ReferencePolicy,
    /// Recompute every N frames and reuse in between, ignoring the exits.
    pub fixed_step: Option<usize>,
    pub gate: GateKind,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gamma: 0.97,
            tau_var: 0.4,
            exits: vec![1, 2, 3, 4],
            entropy_base: EntropyBase::Bits,
            min_prob: None,
            detector: DetectorKind::ToyHead,
            reference: ReferencePolicy::Keyframe,
            fixed_step: None,
            gate: GateKind::Teem,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau_var) {
            return Err(Error::Config(format!("tau_var {} outside [0, 1]", self.tau_var)));
        }
        if self.exits.is_empty() || self.exits.iter().any(|&l| !(1..=NUM_STAGES).contains(&l)) {
            return Err(Error::Config(format!("exits must be a non-empty subset of 1..={NUM_STAGES}")));
        }
        if self.exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("exits must be strictly increasing".into()));
        }
        if let Some(p) = self.min_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("min_prob {p} outside [0, 1]")));
            }
        }
        if self.fixed_step == Some(0) {
            return Err(Error::Config("fixed_step must be positive".into()));
        }
        self.detector.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "exit")]
pub enum FullReason {
    FirstFrame,
    ChangedAtExit(usize),
    NoExitConfident,
    Scheduled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    FullCompute(FullReason),
    Reuse(usize),
    ScheduledReuse,
}

impl Outcome {
    pub fn is_full(&self) -> bool {
        matches!(self, Outcome::FullCompute(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub exit: usize,
    /// `[unchanged, changed]`
    pub probs: [f64; 2],
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub outcome: Outcome,
    pub evaluated: Vec<ExitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: usize,
    pub detections: DetectionSet,
    pub decision: ExitDecision,
    pub macs_charged: u64,
}

/// The keyframe cache. Features exist for every enabled exit whenever
/// detections do.
#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    pub features: Vec<Option<FeatureMap>>,
    pub detections: Option<DetectionSet>,
    pub annotations: Vec<ObjectAnnotation>,
    pub reference_frame: Option<usize>,
    pub frames_since_full_compute: usize,
}

impl PipelineState {
    pub fn is_empty(&self) -> bool {
        self.detections.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    pub backbone: Backbone,
    pub teems: Vec<Teem>,
    pub detector: Detector,
}

pub struct Pipeline {
    config: PipelineConfig,
    models: Option<Models>,
    costs: Option<MacReport>,
    state: PipelineState,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            models: None,
            costs: None,
            state: PipelineState::default(),
        })
    }

    pub fn with_models(config: PipelineConfig, models: Models) -> Result<Self> {
        let mut p = Self::new(config)?;
        p.load_models(models)?;
        Ok(p)
    }

    pub fn load_models(&mut self, models: Models) -> Result<()> {
        let bb = models.backbone.config();
        if models.teems.len() != NUM_STAGES {
            return Err(Error::Config(format!("expected {NUM_STAGES} exits, got {}", models.teems.len())));
        }
        for (k, t) in models.teems.iter().enumerate() {
            if t.config.channels != bb.channels(k + 1) {
                return Err(Error::Shape(format!(
                    "exit {} has {} channels, stage has {}",
                    k + 1,
                    t.config.channels,
                    bb.channels(k + 1)
                )));
            }
        }
        // the oracle stands in for a head of the default shape
        let head = match &models.detector {
            Detector::Toy(h) => h.config,
            Detector::Oracle(_) => HeadConfig::default(),
        };
        let teem_cfgs: Vec<TeemConfig> = models.teems.iter().map(|t| t.config).collect();
        self.costs = Some(mac_report(bb, &teem_cfgs, &head)?);
        self.models = Some(models);
        self.reset_state();
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn costs(&self) -> Option<&MacReport> {
        self.costs.as_ref()
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn reset_state(&mut self) {
        self.state = PipelineState {
            features: vec![None; NUM_STAGES],
            ..Default::default()
        };
    }

    pub fn process_frame(&mut self, frame: &FrameRecord) -> Result<FrameResult> {
        let (Some(models), Some(costs)) = (self.models.as_ref(), self.costs.as_ref()) else {
            return Err(Error::Lifecycle("process_frame called before models were loaded".into()));
        };
        let cfg = &self.config;
        let mut trunk = Trunk::new(&models.backbone, frame)?;

        let (outcome, evaluated) = if self.state.is_empty() {
            (Outcome::FullCompute(FullReason::FirstFrame), Vec::new())
        } else if let Some(n) = cfg.fixed_step {
            if self.state.frames_since_full_compute + 1 >= n {
                (Outcome::FullCompute(FullReason::Scheduled), Vec::new())
            } else {
                (Outcome::ScheduledReuse, Vec::new())
            }
        } else if cfg.gate == GateKind::GroundTruth {
            let label = scenery_change(&self.state.annotations, &frame.annotations, cfg.tau_var)?;
            let probs = match label {
                SceneryLabel::Unchanged => [1.0, 0.0],
                SceneryLabel::Changed => [0.0, 1.0],
            };
            let rec = ExitRecord {
                exit: 1,
                probs,
                entropy: 0.0,
            };
            let outcome = match label {
                SceneryLabel::Unchanged => Outcome::Reuse(1),
                SceneryLabel::Changed => Outcome::FullCompute(FullReason::ChangedAtExit(1)),
            };
            (outcome, vec![rec])
        } else {
            let mut evaluated = Vec::new();
            let mut outcome = Outcome::FullCompute(FullReason::NoExitConfident);
            for &l in &cfg.exits {
                let cur = trunk.advance_to(l)?;
                let reference = self.state.features[l - 1].as_ref().expect("cached at every enabled exit");
                let (_, logits) = models.teems[l - 1].forward(reference, cur, cfg.entropy_base)?;
                evaluated.push(ExitRecord {
                    exit: l,
                    probs: logits.probs,
                    entropy: logits.entropy,
                });
                let confident = logits.entropy < cfg.gamma
                    && cfg.min_prob.map_or(true, |p| logits.probs[0].max(logits.probs[1]) >= p);
                if confident {
                    outcome = match logits.predicted() {
                        SceneryLabel::Unchanged => Outcome::Reuse(l),
                        SceneryLabel::Changed => Outcome::FullCompute(FullReason::ChangedAtExit(l)),
                    };
                    break;
                }
            }
            (outcome, evaluated)
        };

        let exits_run: Vec<usize> = if cfg.gate == GateKind::Teem {
            evaluated.iter().map(|e| e.exit).collect()
        } else {
            // the ground-truth gate is charged as if exit 1 ran
            evaluated.iter().map(|_| 1).collect()
        };
        let (detections, macs) = match outcome {
            Outcome::FullCompute(_) => {
                let deepest = if models.detector.needs_features() {
                    NUM_STAGES
                } else {
                    *cfg.exits.last().expect("validated non-empty")
                };
                for &l in &cfg.exits {
                    trunk.advance_to(l)?;
                }
                let stage4 = if deepest == NUM_STAGES {
                    Some(trunk.advance_to(NUM_STAGES)?.clone())
                } else {
                    None
                };
                let dets = models.detector.detect(frame, stage4.as_ref())?;
                for &l in &cfg.exits {
                    self.state.features[l - 1] = trunk.tap(l).cloned();
                }
                self.state.detections = Some(dets.clone());
                self.state.annotations = frame.annotations.clone();
                self.state.reference_frame = Some(frame.frame_index);
                self.state.frames_since_full_compute = 0;
                (dets, costs.full_compute_charge(&exits_run))
            }
            Outcome::Reuse(l) => {
                if cfg.reference == ReferencePolicy::Sliding {
                    for &e in &exits_run {
                        if let Some(t) = trunk.tap(e) {
                            self.state.features[e - 1] = Some(t.clone());
                        }
                    }
                    self.state.annotations = frame.annotations.clone();
                }
                self.state.frames_since_full_compute += 1;
                (self.reused(frame), costs.reuse_charge(l, &exits_run))
            }
            Outcome::ScheduledReuse => {
                self.state.frames_since_full_compute += 1;
                (self.reused(frame), 0)
            }
        };

        Ok(FrameResult {
            frame_index: frame.frame_index,
            detections,
            decision: ExitDecision { outcome, evaluated },
            macs_charged: macs,
        })
    }

    fn reused(&self, frame: &FrameRecord) -> DetectionSet {
        let cached = self.state.detections.as_ref().expect("reuse needs a keyframe");
        DetectionSet {
            frame_index: frame.frame_index,
            detections: cached.detections.clone(),
        }
    }

    /// Runs a whole video from a fresh state.
    pub fn process_video(&mut self, video: &SyntheticVideo) -> Result<(Vec<FrameResult>, RunStats)> {
        if self.models.is_none() {
            return Err(Error::Lifecycle("process_video called before models were loaded".into()));
        }
        self.reset_state();
        let results = video
            .frames
            .iter()
            .map(|f| self.process_frame(f))
            .collect::<Result<Vec<_>>>()?;
        let stats = run_stats(&results, self.costs.as_ref().expect("loaded").full.macs);
        Ok((results, stats))
    }
}

pub fn run_stats(results: &[FrameResult], full_macs: u64) -> RunStats {
    let mut full = 0;
    let mut reuse = vec![0; NUM_STAGES];
    let mut scheduled = 0;
    for r in results {
        match r.decision.outcome {
            Outcome::FullCompute(_) => full += 1,
            Outcome::Reuse(l) => reuse[l - 1] += 1,
            Outcome::ScheduledReuse => scheduled += 1,
        }
    }
    RunStats::new(full, reuse, scheduled, results.iter().map(|r| r.macs_charged).sum(), full_macs)
}

/// Lazily evaluated backbone taps of the current frame.
struct Trunk<'a> {
    backbone: &'a Backbone,
    frame: &'a FrameRecord,
    taps: Vec<Option<FeatureMap>>,
    depth: usize,
}

impl<'a> Trunk<'a> {
    fn new(backbone: &'a Backbone, frame: &'a FrameRecord) -> Result<Self> {
        Ok(Self {
            backbone,
            frame,
            taps: vec![None; NUM_STAGES],
            depth: 0,
        })
    }

    fn advance_to(&mut self, l: usize) -> Result<&FeatureMap> {
        while self.depth < l {
            let next = if self.depth == 0 {
                self.backbone.forward_to_stage(&self.frame.image, 1)?
            } else {
                let prev = self.taps[self.depth - 1].as_ref().expect("computed");
                self.backbone.resume(prev, self.depth + 1)?
            };
            self.taps[self.depth] = Some(next);
            self.depth += 1;
        }
        Ok(self.taps[l - 1].as_ref().expect("computed"))
    }

    fn tap(&self, l: usize) -> Option<&FeatureMap> {
        self.taps[l - 1].as_ref()
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub video_id: String,
    pub frame: usize,
    pub outcome: Outcome,
    pub exits: Vec<ExitRecord>,
    pub macs_charged: u64,
    pub num_detections: usize,
}

impl TraceRecord {
    pub fn from_result(video_id: &str, r: &FrameResult) -> Self {
        Self {
            video_id: video_id.to_string(),
            frame: r.frame_index,
            outcome: r.decision.outcome,
            exits: r.decision.evaluated.clone(),
            macs_charged: r.macs_charged,
            num_detections: r.detections.detections.len(),
        }
    }
}

/// Appends one JSON record per frame.
pub fn write_trace(path: &Path, video_id: &str, results: &[FrameResult]) -> Result<()> {
    let mut out = Vec::new();
    for r in results {
        serde_json::to_writer(&mut out, &TraceRecord::from_result(video_id, r))?;
        out.push(b'\n');
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::schema(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Rebuilds run statistics from trace records.
pub fn stats_from_trace(records: &[TraceRecord], full_macs: u64) -> RunStats {
    let mut full = 0;
    let mut reuse = vec![0; NUM_STAGES];
    let mut scheduled = 0;
    for r in records {
        match r.outcome {
            Outcome::FullCompute(_) => full += 1,
            Outcome::Reuse(l) => reuse[l - 1] += 1,
            Outcome::ScheduledReuse => scheduled += 1,
        }
    }
    RunStats::new(full, reuse, scheduled, records.iter().map(|r| r.macs_charged).sum(), full_macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::detector::{detect_video, DetectionHead, OracleDetector};
    use crate::seeds;
    use crate::synthgen::tests::one_object_scene;
    use crate::synthgen::generate_video;
    use crate::teem::TeemConfig;
    use ndarray::Array1;

    fn small_backbone() -> Backbone {
        Backbone::new(BackboneConfig {
            input_size: 64,
            ..Default::default()
        })
        .unwrap()
    }

    /// Exits whose classifier ignores its input and always emits `scores`.
    fn constant_teems(bb: &Backbone, scores: [f64; 2]) -> Vec<Teem> {
        (1..=NUM_STAGES)
            .map(|l| {
                let mut t = Teem::zeros(TeemConfig::new(bb.config().channels(l)));
                t.fc.bias = Array1::from(scores.to_vec()).into_dyn();
                t
            })
            .collect()
    }

    fn video(frames: usize) -> SyntheticVideo {
        let mut cfg = one_object_scene([1.5, 0.5], frames, 0.01);
        cfg.width = 64;
        cfg.height = 64;
        cfg.objects[0].x = 10.0;
        cfg.objects[0].y = 10.0;
        cfg.objects[0].width = 16.0;
        cfg.objects[0].height = 16.0;
        cfg.objects[0].motion[0].velocity = [1.0, 0.5];
        generate_video(&cfg).unwrap()
    }

    fn toy_models(scores: [f64; 2]) -> Models {
        let bb = small_backbone();
        let mut rng = seeds::rng(5);
        let head = DetectionHead::new(HeadConfig::default(), bb.config().channels(4), &mut rng).unwrap();
        Models {
            teems: constant_teems(&bb, scores),
            backbone: bb,
            detector: Detector::Toy(head),
        }
    }

    fn oracle_models(scores: [f64; 2]) -> Models {
        let bb = small_backbone();
        Models {
            teems: constant_teems(&bb, scores),
            backbone: bb,
            detector: Detector::Oracle(OracleDetector {
                jitter_sigma: 0.0,
                drop_prob: 0.0,
                seed: 0,
            }),
        }
    }

    #[test]
    fn lifecycle_error_before_loading() {
        let mut p = Pipeline::new(PipelineConfig::default()).unwrap();
        let v = video(2);
        assert!(matches!(p.process_frame(&v.frames[0]), Err(Error::Lifecycle(_))));
        assert!(matches!(p.process_video(&v), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn gamma_zero_equals_per_frame_detection() {
        let models = toy_models([3.0, 0.0]);
        let v = video(12);
        let baseline = detect_video(&models.detector, Some(&models.backbone), &v).unwrap();
        let cfg = PipelineConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let mut p = Pipeline::with_models(cfg, models).unwrap();
        let (res, stats) = p.process_video(&v).unwrap();
        for (r, b) in res.iter().zip(&baseline) {
            assert_eq!(&r.detections, b);
            assert!(r.decision.outcome.is_full());
        }
        assert_eq!(stats.updating_ratio, 1.0);
        assert_eq!(res[1].decision.outcome, Outcome::FullCompute(FullReason::NoExitConfident));
        assert_eq!(res[1].decision.evaluated.len(), 4);
    }

    #[test]
    fn confident_unchanged_reuses_at_exit_one() {
        // softmax of (ln 9, 0) is (0.9, 0.1): 0.469 bits
        let mut p = Pipeline::with_models(PipelineConfig::default(), oracle_models([9f64.ln(), 0.0])).unwrap();
        let v = video(6);
        let (res, stats) = p.process_video(&v).unwrap();
        assert_eq!(res[0].decision.outcome, Outcome::FullCompute(FullReason::FirstFrame));
        for r in &res[1..] {
            assert_eq!(r.decision.outcome, Outcome::Reuse(1));
            assert_eq!(r.decision.evaluated.len(), 1);
            assert!((r.decision.evaluated[0].entropy - 0.4690).abs() < 1e-4);
            // the keyframe's boxes come back untouched
            assert_eq!(r.detections.detections, res[0].detections.detections);
            assert!(r.macs_charged < res[0].macs_charged);
        }
        assert_eq!(stats.frames, 6);
        assert_eq!(stats.updating_ratio, 6.0);
        assert_eq!(p.state().frames_since_full_compute, 5);
        assert_eq!(p.state().reference_frame, Some(0));
    }

    #[test]
    fn confident_changed_goes_straight_to_main_branch() {
        let mut p = Pipeline::with_models(PipelineConfig::default(), oracle_models([0.0, 9f64.ln()])).unwrap();
        let (res, _) = p.process_video(&video(4)).unwrap();
        for r in &res[1..] {
            assert_eq!(r.decision.outcome, Outcome::FullCompute(FullReason::ChangedAtExit(1)));
            assert_eq!(r.decision.evaluated.len(), 1);
        }
        assert_eq!(p.state().frames_since_full_compute, 0);
        assert_eq!(p.state().reference_frame, Some(3));
    }

    #[test]
    fn gamma_above_one_bit_never_passes_exit_one() {
        // near-uniform output: entropy just below 1 bit
        let cfg = PipelineConfig {
            gamma: 1.0,
            ..Default::default()
        };
        let mut p = Pipeline::with_models(cfg, oracle_models([0.01, 0.0])).unwrap();
        let (res, _) = p.process_video(&video(5)).unwrap();
        assert!(res.iter().all(|r| r.decision.evaluated.iter().all(|e| e.exit == 1)));
    }

    #[test]
    fn costs_follow_the_mac_report() {
        let mut p = Pipeline::with_models(PipelineConfig::default(), oracle_models([9f64.ln(), 0.0])).unwrap();
        let (res, _) = p.process_video(&video(3)).unwrap();
        let c = p.costs().unwrap().clone();
        assert_eq!(res[0].macs_charged, c.full.macs);
        assert_eq!(res[1].macs_charged, c.exits[0].path.macs);
    }

    #[test]
    fn reset_then_second_video_equals_fresh_run() {
        let a = video(5);
        let mut cfg_b = one_object_scene([-1.0, 0.0], 5, 0.02);
        cfg_b.width = 64;
        cfg_b.height = 64;
        cfg_b.objects[0].x = 30.0;
        cfg_b.objects[0].y = 20.0;
        cfg_b.objects[0].width = 12.0;
        cfg_b.objects[0].height = 12.0;
        let b = generate_video(&cfg_b).unwrap();
        let mut p = Pipeline::with_models(PipelineConfig::default(), toy_models([0.0, 0.0])).unwrap();
        p.process_video(&a).unwrap();
        p.reset_state();
        p.reset_state();
        assert!(p.state().is_empty());
        let first = p.process_frame(&b.frames[0]).unwrap();
        assert_eq!(first.decision.outcome, Outcome::FullCompute(FullReason::FirstFrame));
        let mut fresh = Pipeline::with_models(PipelineConfig::default(), toy_models([0.0, 0.0])).unwrap();
        let (rb, _) = fresh.process_video(&b).unwrap();
        let (rb2, _) = p.process_video(&b).unwrap();
        assert_eq!(rb, rb2);
    }

    #[test]
    fn fixed_step_ratio_is_exact() {
        let cfg = PipelineConfig {
            fixed_step: Some(3),
            ..Default::default()
        };
        let mut p = Pipeline::with_models(cfg, oracle_models([0.0, 0.0])).unwrap();
        let (res, stats) = p.process_video(&video(12)).unwrap();
        assert_eq!(stats.updating_ratio, 3.0);
        let fulls: Vec<usize> = res.iter().filter(|r| r.decision.outcome.is_full()).map(|r| r.frame_index).collect();
        assert_eq!(fulls, vec![0, 3, 6, 9]);
    }

    #[test]
    fn ground_truth_gate_on_static_video() {
        let cfg = PipelineConfig {
            gate: GateKind::GroundTruth,
            ..Default::default()
        };
        let mut p = Pipeline::with_models(cfg, oracle_models([0.0, 0.0])).unwrap();
        let mut sc = one_object_scene([0.0, 0.0], 10, 0.0);
        sc.width = 64;
        sc.height = 64;
        sc.objects[0].x = 5.0;
        sc.objects[0].y = 5.0;
        sc.objects[0].width = 10.0;
        sc.objects[0].height = 10.0;
        let (res, stats) = p.process_video(&generate_video(&sc).unwrap()).unwrap();
        assert_eq!(stats.full_compute_count, 1);
        assert_eq!(stats.updating_ratio, 10.0);
        assert!(res[1..].iter().all(|r| r.decision.outcome == Outcome::Reuse(1)));
    }

    #[test]
    fn config_validation() {
        let bad = |c: PipelineConfig| assert!(matches!(Pipeline::new(c), Err(Error::Config(_))));
        bad(PipelineConfig {
            gamma: -0.1,
            ..Default::default()
        });
        bad(PipelineConfig {
            exits: vec![],
            ..Default::default()
        });
        bad(PipelineConfig {
            exits: vec![2, 1],
            ..Default::default()
        });
        bad(PipelineConfig {
            exits: vec![5],
            ..Default::default()
        });
        bad(PipelineConfig {
            fixed_step: Some(0),
            ..Default::default()
        });
    }

    #[test]
    fn trace_round_trip() {
        let mut p = Pipeline::with_models(PipelineConfig::default(), oracle_models([9f64.ln(), 0.0])).unwrap();
        let (res, stats) = p.process_video(&video(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&path, "v", &res).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(stats_from_trace(&back, stats.full_macs), stats);
    }
}
