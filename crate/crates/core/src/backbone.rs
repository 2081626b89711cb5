//! Four-stage convolutional feature network with a tap after every stage.
//!
//! ```text
//! stem     4x4 conv, stride 4           3 -> C1, ReLU
//! stage 1  residual blocks              C1
//! stage l  2x2 conv, stride 2, ReLU     C(l-1) -> Cl, then residual blocks   (l = 2..4)
//! block    y = relu(x + conv3x3(x) + b)
//! ```
//!
//! Spatial sizes follow floor division: a 224 input gives 56, 28, 14, 7.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::conv_output_size as conv_size;
use crate::nn::{join, relu3, relu_backward, Conv2d, ConvCache, Module, Tensor, TensorKind};
use crate::seeds;
use crate::synthgen::Image;

pub const NUM_STAGES: usize = 4;
pub const STEM_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stages: [4, 16, 32, 64]
                .iter()
                .map(|&channels| StageSpec { channels, blocks: 1 })
                .collect(),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::Config(format!("backbone needs {NUM_STAGES} stages, got {}", self.stages.len())));
        }
        if self.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        if self.input_size < STEM_STRIDE << (NUM_STAGES - 1) {
            return Err(Error::Config(format!(
                "input_size {} is too small for {NUM_STAGES} stages",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.stages[stage - 1].channels
    }
}

/// `(channels, height, width)` after each stage, without running the network.
pub fn stage_shapes(config: &BackboneConfig) -> Vec<(usize, usize, usize)> {
    let (mut h, mut w) = conv_size(config.input_size, config.input_size, STEM_STRIDE, STEM_STRIDE, 0);
    let mut out = Vec::with_capacity(NUM_STAGES);
    for (l, s) in config.stages.iter().enumerate() {
        if l > 0 {
            (h, w) = conv_size(h, w, 2, 2, 0);
        }
        out.push((s.channels, h, w));
    }
    out
}

/// Activations tapped after one backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub stage: usize,
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(stage: usize, values: Array3<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite activation at stage {stage}")));
        }
        Ok(Self { stage, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

/// Maps 8-bit RGB to the network input: `(v / 255 - 0.5) / 0.25` per channel.
pub fn normalize_image(image: &Image) -> Array3<f64> {
    let (w, h) = (image.width, image.height);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| (image.data[(y * w + x) * 3 + c] as f64 / 255.0 - 0.5) / 0.25)
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<Conv2d>,
    blocks: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stages: Vec<Stage>,
}

/// Saved activations of one training forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    stem: (ConvCache, Array3<f64>),
    stages: Vec<StageCache>,
}

#[derive(Debug, Clone)]
struct StageCache {
    down: Option<(ConvCache, Array3<f64>)>,
    blocks: Vec<(ConvCache, Array3<f64>)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seeds::derive_named(config.seed, "backbone"));
        Ok(Self::build(config, &mut rng, false))
    }

    /// All weights and biases zero.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(0);
        Ok(Self::build(config, &mut rng, true))
    }

    fn build<R: Rng>(config: BackboneConfig, rng: &mut R, zero: bool) -> Self {
        let mut conv = |cin, cout, k, s, p, gain| {
            if zero {
                Conv2d::zeros(cin, cout, k, s, p, true)
            } else {
                Conv2d::new(cin, cout, k, s, p, true, gain, rng)
            }
        };
        let c1 = config.stages[0].channels;
        let stem = conv(3, c1, STEM_STRIDE, STEM_STRIDE, 0, 1.0);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = c1;
        for (l, s) in config.stages.iter().enumerate() {
            let down = (l > 0).then(|| conv(cin, s.channels, 2, 2, 0, 1.0));
            // residual branches start small so the identity path dominates early training
            let blocks = (0..s.blocks).map(|_| conv(s.channels, s.channels, 3, 1, 1, 0.5)).collect();
            stages.push(Stage { down, blocks });
            cin = s.channels;
        }
        Self { config, stem, stages }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        let n = self.config.input_size;
        if c != 3 || h != n || w != n {
            return Err(Error::Shape(format!("backbone expects a 3x{n}x{n} input, got {c}x{h}x{w}")));
        }
        Ok(())
    }

    fn run_stage(&self, l: usize, x: &Array3<f64>) -> Array3<f64> {
        let st = &self.stages[l - 1];
        let mut y = match &st.down {
            Some(d) => relu3(&d.forward(x)),
            None => x.clone(),
        };
        for b in &st.blocks {
            y = relu3(&(&y + &b.forward(&y)));
        }
        y
    }

    /// Stage-`l` activations of a normalized input.
    pub fn forward_input_to_stage(&self, x: &Array3<f64>, l: usize) -> Result<FeatureMap> {
        self.check_stage(l)?;
        self.check_input(x)?;
        let mut y = relu3(&self.stem.forward(x));
        for s in 1..=l {
            y = self.run_stage(s, &y);
        }
        FeatureMap::new(l, y)
    }

    pub fn forward_to_stage(&self, image: &Image, l: usize) -> Result<FeatureMap> {
        self.forward_input_to_stage(&normalize_image(image), l)
    }

    pub fn forward_full(&self, image: &Image) -> Result<FeatureMap> {
        self.forward_to_stage(image, NUM_STAGES)
    }

    /// Every tap of one image in a single pass.
    pub fn forward_taps(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        let x = normalize_image(image);
        self.check_input(&x)?;
        let mut y = relu3(&self.stem.forward(&x));
        let mut taps = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            y = self.run_stage(s, &y);
            taps.push(FeatureMap::new(s, y.clone())?);
        }
        Ok(taps)
    }

    /// Continues from a stage-`from.stage` tap up to stage `to`.
    pub fn resume(&self, from: &FeatureMap, to: usize) -> Result<FeatureMap> {
        self.check_stage(to)?;
        if to < from.stage {
            return Err(Error::Contract(format!("cannot resume backwards from stage {} to {to}", from.stage)));
        }
        let expect = stage_shapes(&self.config)[from.stage - 1];
        if from.shape() != expect {
            return Err(Error::Shape(format!(
                "stage {} tap has shape {:?}, expected {expect:?}",
                from.stage,
                from.shape()
            )));
        }
        let mut y = from.values.clone();
        for s in from.stage + 1..=to {
            y = self.run_stage(s, &y);
        }
        FeatureMap::new(to, y)
    }

    fn check_stage(&self, l: usize) -> Result<()> {
        if !(1..=NUM_STAGES).contains(&l) {
            return Err(Error::Domain(format!("stage index {l} outside 1..={NUM_STAGES}")));
        }
        Ok(())
    }

    /// Training forward to stage 4 keeping what the backward pass needs.
    pub fn forward_train(&self, x: &Array3<f64>) -> Result<(Array3<f64>, BackboneCache)> {
        self.check_input(x)?;
        let (s, sc) = self.stem.forward_cached(x);
        let mut y = relu3(&s);
        let stem = (sc, y.clone());
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for st in &self.stages {
            let down = match &st.down {
                Some(d) => {
                    let (z, c) = d.forward_cached(&y);
                    y = relu3(&z);
                    Some((c, y.clone()))
                }
                None => None,
            };
            let mut blocks = Vec::with_capacity(st.blocks.len());
            for b in &st.blocks {
                let (z, c) = b.forward_cached(&y);
                y = relu3(&(&y + &z));
                blocks.push((c, y.clone()));
            }
            stages.push(StageCache { down, blocks });
        }
        Ok((y, BackboneCache { stem, stages }))
    }

    /// Accumulates parameter gradients given the gradient at the stage-4 output.
    pub fn backward(&self, cache: &BackboneCache, dy: &Array3<f64>, grad: &mut Backbone) {
        let mut d = dy.clone();
        for (l, st) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[l];
            for (k, b) in st.blocks.iter().enumerate().rev() {
                let (c, out) = &sc.blocks[k];
                relu_backward(&mut d, out);
                let through = b.backward(c, &d, &mut grad.stages[l].blocks[k], true).expect("input grad");
                d += &through;
            }
            if let (Some(dn), Some((c, out))) = (&st.down, &sc.down) {
                relu_backward(&mut d, out);
                d = dn
                    .backward(c, &d, grad.stages[l].down.as_mut().expect("grad structure"), true)
                    .expect("input grad");
            }
        }
        relu_backward(&mut d, &cache.stem.1);
        self.stem.backward(&cache.stem.0, &d, &mut grad.stem, false);
    }
}

impl Module for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (l, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", l + 1));
            if let Some(d) = &st.down {
                d.visit(&join(&p, "down"), f);
            }
            for (k, b) in st.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("block{k}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (l, st) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", l + 1));
            if let Some(d) = st.down.as_mut() {
                d.visit_mut(&join(&p, "down"), f);
            }
            for (k, b) in st.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("block{k}")), f);
            }
        }
    }
}
