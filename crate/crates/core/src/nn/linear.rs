use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{he_normal, join, Module, Tensor, TensorKind};

/// Fully connected layer `y = W x + b` with `W: (out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: he_normal(&[outputs, inputs], inputs, gain, rng),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![outputs, inputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    fn bias_vec(&self) -> ArrayView1<'_, f64> {
        self.bias.view().into_dimensionality::<Ix1>().expect("1-D bias")
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight_matrix().dot(&x) + self.bias_vec()
    }

    /// Row-batched forward: `x: (N, in) -> (N, out)`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight_matrix().t()) + &self.bias_vec().insert_axis(Axis(0))
    }

    pub fn backward_batch(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        let dw = dy.t().dot(x);
        {
            let mut gw = grad.weight.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            gw += &dw;
        }
        {
            let mut gb = grad.bias.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight_matrix())
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &mut self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &mut self.bias);
    }
}
