use ndarray::{Array1, Array3, Array4, Axis, Ix1};

use super::{join, Module, Tensor, TensorKind};

/// Per-channel batch normalization over `(N, C, H, W)` batches.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; evaluation mode uses the frozen running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn vec(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
        t.view().into_dimensionality::<Ix1>().expect("1-D batch-norm tensor")
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mean = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / count;
        let centered = x - &mean.view().into_shape_with_order((1, c, 1, 1)).unwrap();
        let var = (&centered * &centered).sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / count;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = &centered * &inv_std.view().into_shape_with_order((1, c, 1, 1)).unwrap();
        let gamma = Self::vec(&self.gamma).to_owned().into_shape_with_order((1, c, 1, 1)).unwrap();
        let beta = Self::vec(&self.beta).to_owned().into_shape_with_order((1, c, 1, 1)).unwrap();
        let y = &x_hat * &gamma + &beta;

        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = self.momentum;
        for ch in 0..c {
            self.running_mean[[ch]] = (1.0 - m) * self.running_mean[[ch]] + m * mean[ch];
            self.running_var[[ch]] = (1.0 - m) * self.running_var[[ch]] + m * var[ch] * unbiased;
        }
        (y, BnCache { x_hat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        let c = x.dim().0;
        let mut y = x.clone();
        for ch in 0..c {
            let scale = self.gamma[[ch]] / (self.running_var[[ch]] + self.eps).sqrt();
            let shift = self.beta[[ch]] - self.running_mean[[ch]] * scale;
            y.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&self, cache: &BnCache, dy: &Array4<f64>, grad: &mut BatchNorm2d) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let reduce = |a: &Array4<f64>| a.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        let dbeta = reduce(dy);
        let dgamma = reduce(&(dy * &cache.x_hat));
        for ch in 0..c {
            grad.gamma[[ch]] += dgamma[ch];
            grad.beta[[ch]] += dbeta[ch];
        }
        let gamma = Self::vec(&self.gamma).to_owned();
        let shape = (1, c, 1, 1);
        let dxhat = dy * &gamma.into_shape_with_order(shape).unwrap();
        let sum_dxhat = reduce(&dxhat).into_shape_with_order(shape).unwrap();
        let sum_dxhat_xhat = reduce(&(&dxhat * &cache.x_hat)).into_shape_with_order(shape).unwrap();
        let inv = cache.inv_std.clone().into_shape_with_order(shape).unwrap();
        (dxhat * count - &sum_dxhat - &cache.x_hat * &sum_dxhat_xhat) * &inv / count
    }
}

impl Module for BatchNorm2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor)) {
        f(&join(prefix, "gamma"), TensorKind::Param, &self.gamma);
        f(&join(prefix, "beta"), TensorKind::Param, &self.beta);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "gamma"), TensorKind::Param, &mut self.gamma);
        f(&join(prefix, "beta"), TensorKind::Param, &mut self.beta);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &mut self.running_var);
    }
}
