//! Temporal early-exit module: decides from two feature maps of the same tap
//! whether the scene changed between the reference frame and the current one.
//!
//! ```text
//! z_sub = z_cur - z_ref
//! att   = sigmoid(conv3x3([z_cur ; z_sub]))          (1, h, w)
//! z_att = att * z_cur                                 broadcast over channels
//! S     = fc(gap(relu(bn(conv3x3(z_att)))))           (unchanged, changed)
//! ```
//!
//! The concatenation can take `z_ref` in place of `z_cur` via
//! [`ConcatOperand::Reference`].

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::SceneryLabel;
use crate::nn::{
    global_avg_pool, join, sigmoid, softmax, softmax_cross_entropy, BatchNorm2d, BnCache, Conv2d, ConvCache, Linear,
    Module, Tensor, TensorKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcatOperand {
    /// `[z_cur ; z_cur - z_ref]`
    #[default]
    Current,
    /// `[z_ref ; z_cur - z_ref]`
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyBase {
    #[default]
    Bits,
    Nats,
}

impl EntropyBase {
    fn log(self, p: f64) -> f64 {
        match self {
            EntropyBase::Bits => p.log2(),
            EntropyBase::Nats => p.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeemConfig {
    /// Channel count of the tap this module is attached to.
    pub channels: usize,
    /// Classifier conv width; equal to `channels` unless set.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub concat: ConcatOperand,
}

impl TeemConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            hidden: None,
            concat: ConcatOperand::Current,
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden.unwrap_or(self.channels)
    }
}

/// Parameters of one exit: attention conv, classifier conv + batch norm, and FC.
#[derive(Debug, Clone)]
pub struct Teem {
    pub config: TeemConfig,
    pub attention: Conv2d,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub fc: Linear,
}

pub type TeemParams = Teem;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `(h, w)`, every value in `(0, 1)`.
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitLogits {
    /// Raw scores `(unchanged, changed)`.
    pub scores: [f64; 2],
    pub probs: [f64; 2],
    pub entropy: f64,
}

impl ExitLogits {
    pub fn from_scores(scores: [f64; 2], base: EntropyBase) -> Self {
        let p = softmax(&scores);
        let probs = [p[0], p[1]];
        let entropy = entropy(&probs, base).expect("softmax output is a distribution");
        Self { scores, probs, entropy }
    }

    /// Argmax; a tie counts as changed.
    pub fn predicted(&self) -> SceneryLabel {
        if self.scores[0] > self.scores[1] {
            SceneryLabel::Unchanged
        } else {
            SceneryLabel::Changed
        }
    }
}

/// Shannon entropy `-sum p log p` with `0 log 0 = 0`.
pub fn entropy(probs: &[f64], base: EntropyBase) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("{probs:?} is not a probability distribution")));
    }
    Ok(probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * base.log(p)).sum::<f64>().max(0.0))
}

pub fn entropy_bits(probs: &[f64]) -> Result<f64> {
    entropy(probs, EntropyBase::Bits)
}

fn check_pair(teem: &Teem, z_ref: &Array3<f64>, z_cur: &Array3<f64>) -> Result<()> {
    if z_ref.dim() != z_cur.dim() {
        return Err(Error::Shape(format!("reference {:?} and current {:?} differ", z_ref.dim(), z_cur.dim())));
    }
    if z_cur.dim().0 != teem.config.channels {
        return Err(Error::Shape(format!(
            "exit expects {} channels, got {}",
            teem.config.channels,
            z_cur.dim().0
        )));
    }
    Ok(())
}

fn concat_input(concat: ConcatOperand, z_ref: &Array3<f64>, z_cur: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = z_cur.dim();
    let mut x = Array3::zeros((2 * c, h, w));
    let first = match concat {
        ConcatOperand::Current => z_cur,
        ConcatOperand::Reference => z_ref,
    };
    x.slice_mut(s![..c, .., ..]).assign(first);
    x.slice_mut(s![c.., .., ..]).assign(&(z_cur - z_ref));
    x
}

fn apply_attention(att: &Array2<f64>, z: &Array3<f64>) -> Array3<f64> {
    z * &att.view().insert_axis(Axis(0))
}

/// Saved state of a training forward pass over a batch.
pub struct TeemBatchCache {
    att_caches: Vec<ConvCache>,
    atts: Vec<Array2<f64>>,
    conv_caches: Vec<ConvCache>,
    curs: Vec<Array3<f64>>,
    bn_cache: BnCache,
    bn_out: Array4<f64>,
    pooled: Array2<f64>,
    dscores: Array2<f64>,
}

impl Teem {
    pub fn new<R: Rng>(config: TeemConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let h = config.hidden_channels();
        Self {
            config,
            // attention starts near 0.5 everywhere
            attention: Conv2d::new(2 * c, 1, 3, 1, 1, true, 0.1, rng),
            conv: Conv2d::new(c, h, 3, 1, 1, false, 1.0, rng),
            bn: BatchNorm2d::new(h),
            fc: Linear::new(h, 2, 0.5, rng),
        }
    }

    pub fn zeros(config: TeemConfig) -> Self {
        let c = config.channels;
        let h = config.hidden_channels();
        Self {
            config,
            attention: Conv2d::zeros(2 * c, 1, 3, 1, 1, true),
            conv: Conv2d::zeros(c, h, 3, 1, 1, false),
            bn: BatchNorm2d::new(h),
            fc: Linear::zeros(h, 2),
        }
    }

    pub fn attention_map(&self, z_ref: &FeatureMap, z_cur: &FeatureMap) -> Result<AttentionMap> {
        check_pair(self, &z_ref.values, &z_cur.values)?;
        let pre = self.attention.forward(&concat_input(self.config.concat, &z_ref.values, &z_cur.values));
        Ok(AttentionMap {
            values: pre.index_axis(Axis(0), 0).mapv(sigmoid),
        })
    }

    /// Post-ReLU classifier maps `(C', h, w)` in inference mode.
    fn classifier_maps(&self, z_cur: &Array3<f64>, att: &AttentionMap) -> Result<Array3<f64>> {
        let (c, h, w) = z_cur.dim();
        if c != self.config.channels || att.values.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "classifier input {:?} with attention {:?} does not fit an exit of {} channels",
                z_cur.dim(),
                att.values.dim(),
                self.config.channels
            )));
        }
        let u = self.conv.forward(&apply_attention(&att.values, z_cur));
        Ok(self.bn.forward_eval(&u).mapv(|v| v.max(0.0)))
    }

    pub fn classify(&self, z_cur: &FeatureMap, att: &AttentionMap, base: EntropyBase) -> Result<ExitLogits> {
        let r = self.classifier_maps(&z_cur.values, att)?;
        let s = self.fc.forward(global_avg_pool(&r).view());
        Ok(ExitLogits::from_scores([s[0], s[1]], base))
    }

    pub fn forward(&self, z_ref: &FeatureMap, z_cur: &FeatureMap, base: EntropyBase) -> Result<(AttentionMap, ExitLogits)> {
        let att = self.attention_map(z_ref, z_cur)?;
        let logits = self.classify(z_cur, &att, base)?;
        Ok((att, logits))
    }

    /// Evidence for `target` over the tap's grid, min-max scaled to `[0, 1]`.
    /// A spatially constant map scales to all zeros.
    pub fn class_activation_map(&self, z_ref: &FeatureMap, z_cur: &FeatureMap, target: SceneryLabel) -> Result<Array2<f64>> {
        let att = self.attention_map(z_ref, z_cur)?;
        let r = self.classifier_maps(&z_cur.values, &att)?;
        let wrow = self.fc.weight_matrix().row(target.index()).to_owned();
        let (_, h, w) = r.dim();
        let mut cam = Array2::zeros((h, w));
        for (ch, map) in r.axis_iter(Axis(0)).enumerate() {
            cam.scaled_add(wrow[ch], &map);
        }
        let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
            return Ok(Array2::zeros((h, w)));
        }
        Ok(cam.mapv(|v| (v - lo) / span))
    }

    /// Training-mode forward over a batch (batch-norm uses batch statistics and
    /// updates its running estimates). Returns mean cross-entropy and probabilities.
    pub fn forward_train(
        &mut self,
        refs: &[&Array3<f64>],
        curs: &[&Array3<f64>],
        targets: &[usize],
    ) -> Result<(f64, Array2<f64>, TeemBatchCache)> {
        let n = curs.len();
        if n == 0 || refs.len() != n || targets.len() != n {
            return Err(Error::Shape("training batch needs matching, non-empty refs/curs/targets".into()));
        }
        let hidden = self.config.hidden_channels();
        let (_, h, w) = curs[0].dim();
        let mut att_caches = Vec::with_capacity(n);
        let mut atts = Vec::with_capacity(n);
        let mut conv_caches = Vec::with_capacity(n);
        let mut u = Array4::zeros((n, hidden, h, w));
        for i in 0..n {
            check_pair(self, refs[i], curs[i])?;
            if curs[i].dim() != (self.config.channels, h, w) {
                return Err(Error::Shape("all maps in a batch must share a shape".into()));
            }
            let (pre, ac) = self.attention.forward_cached(&concat_input(self.config.concat, refs[i], curs[i]));
            let att = pre.index_axis(Axis(0), 0).mapv(sigmoid);
            let (ui, cc) = self.conv.forward_cached(&apply_attention(&att, curs[i]));
            u.index_axis_mut(Axis(0), i).assign(&ui);
            att_caches.push(ac);
            atts.push(att);
            conv_caches.push(cc);
        }
        let (v, bn_cache) = self.bn.forward_train(&u);
        let r = v.mapv(|x| x.max(0.0));
        let pooled = r.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64;
        let scores = self.fc.forward_batch(&pooled);
        let (loss, probs, dscores) = softmax_cross_entropy(&scores, targets);
        Ok((
            loss,
            probs,
            TeemBatchCache {
                att_caches,
                atts,
                conv_caches,
                curs: curs.iter().map(|c| (*c).clone()).collect(),
                bn_cache,
                bn_out: v,
                pooled,
                dscores,
            },
        ))
    }

    /// Accumulates gradients of the mean batch loss into `grad`.
    pub fn backward(&self, cache: &TeemBatchCache, grad: &mut Teem) {
        let dpooled = self.fc.backward_batch(&cache.pooled, &cache.dscores, &mut grad.fc);
        let (n, hidden, h, w) = cache.bn_out.dim();
        let inv_hw = 1.0 / (h * w) as f64;
        let mut dv = Array4::zeros((n, hidden, h, w));
        ndarray::Zip::indexed(&mut dv).and(&cache.bn_out).for_each(|(i, c, _, _), d, &v| {
            if v > 0.0 {
                *d = dpooled[[i, c]] * inv_hw;
            }
        });
        let du = self.bn.backward(&cache.bn_cache, &dv, &mut grad.bn);
        for i in 0..n {
            let dui = du.index_axis(Axis(0), i).to_owned();
            let dzatt = self
                .conv
                .backward(&cache.conv_caches[i], &dui, &mut grad.conv, true)
                .expect("input grad");
            let datt: Array2<f64> = (&dzatt * &cache.curs[i]).sum_axis(Axis(0));
            let att = &cache.atts[i];
            let dpre = (&datt * &att.mapv(|a| a * (1.0 - a))).insert_axis(Axis(0));
            self.attention.backward(&cache.att_caches[i], &dpre, &mut grad.attention, false);
        }
    }
}

impl Module for Teem {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// One compared parameter of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

fn flat_params(t: &Teem) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    t.visit("", &mut |name, kind, tensor| {
        if kind == TensorKind::Param {
            out.push((name.to_string(), tensor.len()));
        }
    });
    out
}

/// Compares analytic gradients of the training loss with central differences
/// at `count` parameters drawn uniformly from all trainable entries.
///
/// Relative error is `|a - n| / max(|a|, |n|)`; when both magnitudes are below
/// `1e-10` the entry is exact agreement on zero and reports 0.
pub fn gradient_check<R: Rng>(
    teem: &Teem,
    refs: &[&Array3<f64>],
    curs: &[&Array3<f64>],
    targets: &[usize],
    count: usize,
    step: f64,
    rng: &mut R,
) -> Result<Vec<GradCheckEntry>> {
    let mut work = teem.clone();
    let (_, _, cache) = work.forward_train(refs, curs, targets)?;
    let mut grad = crate::nn::zeros_like(teem);
    teem.backward(&cache, &mut grad);

    let params = flat_params(teem);
    let total: usize = params.iter().map(|p| p.1).sum();
    let loss_at = |name: &str, idx: usize, delta: f64| -> Result<f64> {
        let mut m = teem.clone();
        m.visit_mut("", &mut |n, _, t| {
            if n == name {
                t.as_slice_mut().expect("contiguous")[idx] += delta;
            }
        });
        Ok(m.forward_train(refs, curs, targets)?.0)
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let (name, idx) = params
            .iter()
            .find_map(|(n, len)| {
                if flat < *len {
                    Some((n.clone(), flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .expect("index within total");
        let numeric = (loss_at(&name, idx, step)? - loss_at(&name, idx, -step)?) / (2.0 * step);
        let mut analytic = 0.0;
        grad.visit("", &mut |n, _, t| {
            if n == name {
                analytic = t.as_slice().expect("contiguous")[idx];
            }
        });
        let scale = analytic.abs().max(numeric.abs());
        let rel_error = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
        out.push(GradCheckEntry {
            name,
            index: idx,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(out)
}

/// Pooled classifier features, exposed for inspection.
pub fn pooled_features(teem: &Teem, z_ref: &FeatureMap, z_cur: &FeatureMap) -> Result<Array1<f64>> {
    let att = teem.attention_map(z_ref, z_cur)?;
    Ok(global_avg_pool(&teem.classifier_maps(&z_cur.values, &att)?))
}
