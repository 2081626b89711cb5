//! Training of the four exits on frame pairs with the feature network frozen,
//! and per-exit classifier evaluation.
//!
//! One shared pass over the data feeds all four exits; each exit's loss only
//! reaches its own parameters, so this equals four independent runs.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap, NUM_STAGES};
use crate::error::{Error, Result};
use crate::geometry::SceneryLabel;
use crate::nn::{read_checkpoint, write_checkpoint, zeros_like, Adam, Module};
use crate::sampler::FramePairSample;
use crate::seeds;
use crate::synthgen::SyntheticVideo;
use crate::teem::{ConcatOperand, EntropyBase, Teem, TeemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Threshold the sample labels were produced with; recorded, not re-applied.
    pub tau_var: f64,
    pub concat: ConcatOperand,
    /// Lower bound on each exit's classifier width. The shallowest tap is
    /// only a few channels wide; a classifier that narrow tends to stall at
    /// the class prior.
    pub min_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            tau_var: 0.4,
            concat: ConcatOperand::Current,
            min_hidden: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub exit: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub entries: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn for_exit(&self, exit: usize) -> impl Iterator<Item = &EpochRecord> {
        self.entries.iter().filter(move |e| e.exit == exit)
    }
}

/// Confusion counts with changed as the positive class, and derived scores.
/// Precision, recall and F1 are 0 when their denominators are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitMetrics {
    pub exit: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ExitMetrics {
    pub fn from_counts(exit: usize, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            exit,
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub exits: Vec<ExitMetrics>,
}

impl ClassifierReport {
    /// Exit with the highest accuracy; ties go to the shallower exit.
    pub fn best(&self) -> Option<&ExitMetrics> {
        self.exits
            .iter()
            .fold(None, |best: Option<&ExitMetrics>, e| match best {
                Some(b) if b.accuracy >= e.accuracy => Some(b),
                _ => Some(e),
            })
    }
}

/// Backbone taps of every frame a sample set touches, stored in single
/// precision to halve memory.
pub struct TapCache {
    taps: HashMap<(String, usize), Vec<ndarray::Array3<f32>>>,
}

impl TapCache {
    pub fn build(backbone: &Backbone, videos: &[SyntheticVideo], samples: &[FramePairSample]) -> Result<Self> {
        let by_id: HashMap<&str, &SyntheticVideo> = videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
        let mut taps = HashMap::new();
        for s in samples {
            let v = by_id
                .get(s.video_id.as_str())
                .ok_or_else(|| Error::Config(format!("sample refers to unknown video {:?}", s.video_id)))?;
            for f in [s.frame_i, s.frame_j] {
                let key = (s.video_id.clone(), f);
                if taps.contains_key(&key) {
                    continue;
                }
                let frame = v.frame(f).ok_or_else(|| {
                    Error::Config(format!("sample refers to frame {f} of {:?}, which has {} frames", s.video_id, v.len()))
                })?;
                let maps = backbone.forward_taps(&frame.image)?;
                taps.insert(key, maps.into_iter().map(|m| m.values.mapv(|x| x as f32)).collect());
            }
        }
        Ok(Self { taps })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Tap `exit` (1-based) of a frame.
    pub fn get(&self, video_id: &str, frame: usize, exit: usize) -> Option<Array3<f64>> {
        self.taps
            .get(&(video_id.to_string(), frame))
            .map(|m| m[exit - 1].mapv(|x| x as f64))
    }

    fn pair(&self, s: &FramePairSample, exit: usize) -> (Array3<f64>, Array3<f64>) {
        (
            self.get(&s.video_id, s.frame_i, exit).expect("cached"),
            self.get(&s.video_id, s.frame_j, exit).expect("cached"),
        )
    }
}

/// Exit configurations for every tap of `backbone` under `config`.
pub fn teem_configs(backbone: &BackboneConfig, config: &TrainConfig) -> Vec<TeemConfig> {
    (1..=NUM_STAGES)
        .map(|l| {
            let c = backbone.channels(l);
            TeemConfig {
                channels: c,
                hidden: Some(c.max(config.min_hidden)),
                concat: config.concat,
            }
        })
        .collect()
}

pub fn new_teems(backbone: &Backbone, config: &TrainConfig) -> Vec<Teem> {
    let mut rng = seeds::rng(seeds::derive_named(config.seed, "teem-init"));
    teem_configs(backbone.config(), config)
        .into_iter()
        .map(|cfg| Teem::new(cfg, &mut rng))
        .collect()
}

pub fn train_teems(
    backbone: &Backbone,
    samples: &[FramePairSample],
    videos: &[SyntheticVideo],
    config: &TrainConfig,
) -> Result<(Vec<Teem>, TrainHistory)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let cache = TapCache::build(backbone, videos, samples)?;
    train_teems_cached(backbone, samples, &cache, config)
}

/// As [`train_teems`] over a prebuilt tap cache.
pub fn train_teems_cached(
    backbone: &Backbone,
    samples: &[FramePairSample],
    cache: &TapCache,
    config: &TrainConfig,
) -> Result<(Vec<Teem>, TrainHistory)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut teems = new_teems(backbone, config);
    let mut opts: Vec<Adam> = (0..NUM_STAGES).map(|_| Adam::new(config.learning_rate)).collect();
    let mut rng = seeds::rng(seeds::derive_named(config.seed, "teem-train"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = [0.0; NUM_STAGES];
        let mut correct = [0usize; NUM_STAGES];
        for batch in order.chunks(config.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&k| samples[k].label.index()).collect();
            for l in 1..=NUM_STAGES {
                let pairs: Vec<(Array3<f64>, Array3<f64>)> = batch.iter().map(|&k| cache.pair(&samples[k], l)).collect();
                let refs: Vec<&Array3<f64>> = pairs.iter().map(|p| &p.0).collect();
                let curs: Vec<&Array3<f64>> = pairs.iter().map(|p| &p.1).collect();
                let teem = &mut teems[l - 1];
                let (loss, probs, bcache) = teem.forward_train(&refs, &curs, &targets)?;
                let mut grad = zeros_like(teem);
                teem.backward(&bcache, &mut grad);
                opts[l - 1].step(teem, &grad);
                loss_sum[l - 1] += loss * batch.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    // a tie counts as changed
                    let pred = if probs[[r, 0]] > probs[[r, 1]] { 0 } else { 1 };
                    if pred == t {
                        correct[l - 1] += 1;
                    }
                }
            }
        }
        for l in 1..=NUM_STAGES {
            let rec = EpochRecord {
                epoch,
                exit: l,
                mean_loss: loss_sum[l - 1] / samples.len() as f64,
                train_accuracy: correct[l - 1] as f64 / samples.len() as f64,
            };
            log::info!(
                "epoch {epoch} exit {l}: loss {:.4} acc {:.3}",
                rec.mean_loss,
                rec.train_accuracy
            );
            history.entries.push(rec);
        }
    }
    Ok((teems, history))
}

/// Argmax verdict of every exit on every sample, no entropy gate.
pub fn evaluate_classifier(
    teems: &[Teem],
    backbone: &Backbone,
    samples: &[FramePairSample],
    videos: &[SyntheticVideo],
) -> Result<ClassifierReport> {
    if samples.is_empty() {
        return Err(Error::Config("no test samples".into()));
    }
    let cache = TapCache::build(backbone, videos, samples)?;
    evaluate_classifier_cached(teems, samples, &cache)
}

pub fn evaluate_classifier_cached(teems: &[Teem], samples: &[FramePairSample], cache: &TapCache) -> Result<ClassifierReport> {
    if samples.is_empty() {
        return Err(Error::Config("no test samples".into()));
    }
    let mut exits = Vec::with_capacity(teems.len());
    for (k, teem) in teems.iter().enumerate() {
        let l = k + 1;
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for s in samples {
            let (a, b) = cache.pair(s, l);
            let (_, logits) = teem.forward(&FeatureMap::new(l, a)?, &FeatureMap::new(l, b)?, EntropyBase::Bits)?;
            match (logits.predicted(), s.label) {
                (SceneryLabel::Changed, SceneryLabel::Changed) => tp += 1,
                (SceneryLabel::Changed, SceneryLabel::Unchanged) => fp += 1,
                (SceneryLabel::Unchanged, SceneryLabel::Changed) => fn_ += 1,
                (SceneryLabel::Unchanged, SceneryLabel::Unchanged) => tn += 1,
            }
        }
        exits.push(ExitMetrics::from_counts(l, tp, fp, fn_, tn));
    }
    Ok(ClassifierReport { exits })
}

/// All exits in one checkpoint, keyed `exit1` .. `exit4`.
pub fn save_teems(path: &Path, teems: &[Teem], meta: serde_json::Value) -> Result<()> {
    let names: Vec<String> = (1..=teems.len()).map(|l| format!("exit{l}")).collect();
    let modules: Vec<(&str, &dyn Module)> = names
        .iter()
        .zip(teems)
        .map(|(n, t)| (n.as_str(), t as &dyn Module))
        .collect();
    let configs: Vec<TeemConfig> = teems.iter().map(|t| t.config).collect();
    let meta = serde_json::json!({ "teems": configs, "meta": meta });
    write_checkpoint(path, &modules, meta)
}

pub fn load_teems(path: &Path) -> Result<Vec<Teem>> {
    let ck = read_checkpoint(path)?;
    let configs: Vec<TeemConfig> = serde_json::from_value(ck.meta["teems"].clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("exit configs: {e}"),
    })?;
    configs
        .into_iter()
        .enumerate()
        .map(|(k, cfg)| {
            let mut t = Teem::zeros(cfg);
            ck.load_into(&format!("exit{}", k + 1), &mut t)?;
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_from_counts() {
        let m = ExitMetrics::from_counts(1, 45, 5, 5, 45);
        assert!((m.accuracy - 0.9).abs() < 1e-12);
        assert!((m.precision - 0.9).abs() < 1e-12);
        assert!((m.recall - 0.9).abs() < 1e-12);
        assert!((m.f1 - 0.9).abs() < 1e-12);
        // an always-changed predictor on a balanced set
        let m = ExitMetrics::from_counts(2, 50, 50, 0, 0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.accuracy, (m.tp + m.tn) as f64 / m.total() as f64);
        let none = ExitMetrics::from_counts(3, 0, 0, 0, 10);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn best_exit_prefers_shallow_on_ties() {
        let r = ClassifierReport {
            exits: vec![
                ExitMetrics::from_counts(1, 8, 2, 0, 0),
                ExitMetrics::from_counts(2, 9, 1, 0, 0),
                ExitMetrics::from_counts(3, 9, 1, 0, 0),
            ],
        };
        assert_eq!(r.best().unwrap().exit, 2);
    }
}
