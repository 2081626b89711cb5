//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Every layer stores its tensors as `ArrayD<f64>` and exposes them through
//! [`Module`], which drives the optimizer, checkpointing and hashing. Gradients
//! are accumulated into a zeroed clone of the module itself (see [`zeros_like`]).

pub mod checkpoint;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod optim;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use optim::Adam;

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    /// Trainable.
    Param,
    /// Persistent state that is not trained (batch-norm running statistics).
    Buffer,
}

pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Clone of `m` with every trainable tensor set to zero; used as a gradient accumulator.
pub fn zeros_like<M: Module + Clone>(m: &M) -> M {
    let mut g = m.clone();
    g.visit_mut("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            t.fill(0.0);
        }
    });
    g
}

/// Adds `other`'s trainable tensors into `acc`. Both must share a structure.
pub fn accumulate<M: Module>(acc: &mut M, other: &M) {
    let mut src = Vec::new();
    other.visit("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            src.push(t);
        }
    });
    let mut i = 0;
    acc.visit_mut("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            *t += src[i];
            i += 1;
        }
    });
}

/// Multiplies every trainable tensor by `factor`.
pub fn scale_params<M: Module>(m: &mut M, factor: f64) {
    m.visit_mut("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            t.mapv_inplace(|v| v * factor);
        }
    });
}

pub fn param_count<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            n += t.len();
        }
    });
    n
}

/// SHA-256 over every tensor's name, shape and IEEE-754 bits.
pub fn state_digest<M: Module + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, _, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub(crate) fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || normal.sample(rng))
}

pub fn relu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `dy` where the forward ReLU output was not positive.
pub fn relu_backward(dy: &mut Array3<f64>, out: &Array3<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over a 1-D score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean cross-entropy of row-wise softmax against integer targets, and its
/// gradient with respect to the scores.
pub fn softmax_cross_entropy(scores: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>, Array2<f64>) {
    let n = scores.nrows();
    let mut probs = Array2::zeros(scores.raw_dim());
    let mut grad = Array2::zeros(scores.raw_dim());
    let mut loss = 0.0;
    for (r, row) in scores.axis_iter(Axis(0)).enumerate() {
        let p = softmax(&row.to_vec());
        loss -= p[targets[r]].max(f64::MIN_POSITIVE).ln();
        for (c, pc) in p.iter().enumerate() {
            probs[[r, c]] = *pc;
            grad[[r, c]] = (pc - if c == targets[r] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, probs, grad)
}

/// Global average pool over the spatial axes of a `(C, H, W)` map.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let hw = (x.shape()[1] * x.shape()[2]) as f64;
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) / hw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[1.0, 3.0]);
        let b = softmax(&[101.0, 103.0]);
        assert!((a[0] - b[0]).abs() < 1e-12);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_only_when_one_hot() {
        let s = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        let (l, _, g) = softmax_cross_entropy(&s, &[1]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((g[[0, 0]] - 0.5).abs() < 1e-12);
        let s = Array2::from_shape_vec((1, 2), vec![-800.0, 800.0]).unwrap();
        let (l, _, _) = softmax_cross_entropy(&s, &[1]);
        assert!(l >= 0.0 && l < 1e-12);
    }
}
