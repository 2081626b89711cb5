//! Analytic multiply-accumulate and parameter accounting. Only convolutions and
//! fully connected layers cost MACs; normalization contributes parameters only.

use serde::{Deserialize, Serialize};

use crate::backbone::{stage_shapes, BackboneConfig, STEM_STRIDE};
use crate::detector::HeadConfig;
use crate::error::{Error, Result};
use crate::teem::TeemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        out_h: usize,
        out_w: usize,
        bias: bool,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
}

impl LayerSpec {
    /// Square-kernel convolution.
    pub fn conv(cin: usize, cout: usize, k: usize, out: (usize, usize), bias: bool) -> Self {
        LayerSpec::Conv {
            cin,
            cout,
            kh: k,
            kw: k,
            out_h: out.0,
            out_w: out.1,
            bias,
        }
    }

    pub fn fc(inputs: usize, outputs: usize, bias: bool) -> Self {
        LayerSpec::Fc { inputs, outputs, bias }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerSpec::Conv { cin, cout, kh, kw, bias, .. } => (cin * cout * kh * kw + if bias { cout } else { 0 }) as u64,
            LayerSpec::Fc { inputs, outputs, bias } => (inputs * outputs + if bias { outputs } else { 0 }) as u64,
            LayerSpec::BatchNorm { channels } => 2 * channels as u64,
        }
    }
}

pub fn mac_count(layer: &LayerSpec) -> u64 {
    match *layer {
        LayerSpec::Conv { cin, cout, kh, kw, out_h, out_w, .. } => (cin * cout * kh * kw * out_h * out_w) as u64,
        LayerSpec::Fc { inputs, outputs, .. } => (inputs * outputs) as u64,
        LayerSpec::BatchNorm { .. } => 0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl Cost {
    pub fn of(layers: &[LayerSpec]) -> Self {
        layers.iter().fold(Cost::default(), |acc, l| acc + Cost { macs: mac_count(l), params: l.params() })
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            params: self.params + o.params,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Layer inventory of the whole system, grouped the way paths are charged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub stem: Vec<LayerSpec>,
    pub stages: Vec<Vec<LayerSpec>>,
    pub head: Vec<LayerSpec>,
    pub teems: Vec<Vec<LayerSpec>>,
}

pub fn network_spec(backbone: &BackboneConfig, teems: &[TeemConfig], head: &HeadConfig) -> Result<NetworkSpec> {
    backbone.validate()?;
    let shapes = stage_shapes(backbone);
    if teems.len() != shapes.len() {
        return Err(Error::Config(format!("expected {} exit configs, got {}", shapes.len(), teems.len())));
    }
    let stem_out = backbone.input_size / STEM_STRIDE;
    let stem = vec![LayerSpec::conv(3, backbone.channels(1), STEM_STRIDE, (stem_out, stem_out), true)];
    let mut stages = Vec::new();
    let mut cin = backbone.channels(1);
    for (l, (s, &(c, h, w))) in backbone.stages.iter().zip(&shapes).enumerate() {
        let mut layers = Vec::new();
        if l > 0 {
            layers.push(LayerSpec::conv(cin, c, 2, (h, w), true));
        }
        layers.extend((0..s.blocks).map(|_| LayerSpec::conv(c, c, 3, (h, w), true)));
        stages.push(layers);
        cin = c;
    }
    let mut teem_layers = Vec::new();
    for (t, &(c, h, w)) in teems.iter().zip(&shapes) {
        if t.channels != c {
            return Err(Error::Config(format!("exit config has {} channels, stage has {c}", t.channels)));
        }
        let hid = t.hidden_channels();
        teem_layers.push(vec![
            LayerSpec::conv(2 * c, 1, 3, (h, w), true),
            LayerSpec::conv(c, hid, 3, (h, w), false),
            LayerSpec::BatchNorm { channels: hid },
            LayerSpec::fc(hid, 2, true),
        ]);
    }
    let &(c4, h4, w4) = shapes.last().expect("four stages");
    let mut head_layers = vec![LayerSpec::conv(c4, head.hidden, 3, (h4, w4), true)];
    head_layers.extend((0..head.depth).map(|_| LayerSpec::conv(head.hidden, head.hidden, 3, (h4, w4), true)));
    head_layers.push(LayerSpec::conv(head.hidden, head.output_channels(), 1, (h4, w4), true));
    Ok(NetworkSpec {
        stem,
        stages,
        head: head_layers,
        teems: teem_layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitCost {
    pub exit: usize,
    /// Stem, stages `1..=exit` and this exit's module.
    pub path: Cost,
    pub teem: Cost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    /// Backbone plus detection head.
    pub full: Cost,
    pub backbone: Cost,
    pub head: Cost,
    /// Stem plus stages `1..=l`, indexed by `l - 1`.
    pub prefixes: Vec<Cost>,
    pub exits: Vec<ExitCost>,
}

impl MacReport {
    pub fn from_spec(spec: &NetworkSpec) -> Self {
        let mut prefixes = Vec::new();
        let mut acc = Cost::of(&spec.stem);
        for s in &spec.stages {
            acc = acc + Cost::of(s);
            prefixes.push(acc);
        }
        let backbone = acc;
        let head = Cost::of(&spec.head);
        let exits = spec
            .teems
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let teem = Cost::of(t);
                ExitCost {
                    exit: k + 1,
                    path: prefixes[k] + teem,
                    teem,
                }
            })
            .collect();
        Self {
            full: backbone + head,
            backbone,
            head,
            prefixes,
            exits,
        }
    }

    fn teem_sum(&self, evaluated: &[usize]) -> u64 {
        evaluated.iter().map(|&l| self.exits[l - 1].teem.macs).sum()
    }

    /// Main branch after the exits in `evaluated` ran; the trunk up to them is
    /// part of the main branch and is not charged twice.
    pub fn full_compute_charge(&self, evaluated: &[usize]) -> u64 {
        self.full.macs + self.teem_sum(evaluated)
    }

    /// Early exit at `exit` after evaluating `evaluated` (which ends at `exit`).
    pub fn reuse_charge(&self, exit: usize, evaluated: &[usize]) -> u64 {
        self.prefixes[exit - 1].macs + self.teem_sum(evaluated)
    }

    pub fn exit_ratio(&self, exit: usize) -> f64 {
        self.exits[exit - 1].path.macs as f64 / self.full.macs as f64
    }
}

pub fn mac_report(backbone: &BackboneConfig, teems: &[TeemConfig], head: &HeadConfig) -> Result<MacReport> {
    Ok(MacReport::from_spec(&network_spec(backbone, teems, head)?))
}
