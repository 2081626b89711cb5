use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Ix1};
use rand::Rng;

use super::{he_normal, join, Module, Tensor, TensorKind};

/// 2-D convolution with square kernel, symmetric zero padding and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Tensor,
    /// `(out_channels,)`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

/// Saved forward state for [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, gain, rng);
        Self {
            weight,
            bias: bias.then(|| Tensor::zeros(vec![cout])),
            stride,
            padding,
        }
    }

    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![cout, cin, kernel, kernel]),
            bias: bias.then(|| Tensor::zeros(vec![cout])),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        conv_output_size(h, w, self.kernel(), self.stride, self.padding)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let k = self.kernel();
        self.weight
            .view()
            .into_shape_with_order((self.out_channels(), self.in_channels() * k * k))
            .expect("contiguous conv weight")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(x.view(), self.kernel(), self.stride, self.padding, oh, ow);
        let mut y = self.weight_matrix().dot(&cols);
        if let Some(b) = &self.bias {
            let b = b.view().into_dimensionality::<Ix1>().expect("1-D bias");
            y += &b.insert_axis(Axis(1));
        }
        let y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("conv output reshape");
        (y, ConvCache { cols, in_shape: (c, h, w) })
    }

    /// Accumulates weight/bias gradients into `grad`; returns the input
    /// gradient when `input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: &mut Conv2d,
        input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (cout, oh, ow) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, oh * ow))
            .expect("dy reshape");
        let dw = dy2.dot(&cache.cols.t());
        let k = self.kernel();
        {
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((cout, self.in_channels() * k * k))
                .expect("contiguous grad weight");
            gw += &dw;
        }
        if let Some(gb) = grad.bias.as_mut() {
            let db: Array1<f64> = dy2.sum_axis(Axis(1));
            let mut gb = gb.view_mut().into_dimensionality::<Ix1>().expect("1-D bias");
            gb += &db;
        }
        if !input_grad {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&dy2);
        let (c, h, w) = cache.in_shape;
        Some(col2im(&dcols, c, h, w, k, self.stride, self.padding, oh, ow))
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &'a Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), TensorKind::Param, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), TensorKind::Param, b);
        }
    }
}

pub fn conv_output_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let o = |n: usize| (n + 2 * pad).saturating_sub(k) / stride + 1;
    (o(h), o(w))
}

fn im2col(x: ArrayView3<f64>, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    if k == 1 && s == 1 && p == 0 {
        return x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("1x1 reshape");
    }
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![0.0; c * k * k * oh * ow];
    let mut row = 0;
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Array2::from_shape_vec((c * k * k, oh * ow), cols).expect("im2col shape")
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let dcols = dcols.as_standard_layout();
    let src = dcols.as_slice().expect("standard layout");
    let mut dx = vec![0.0; c * h * w];
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let col = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += col[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Array3::from_shape_vec((c, h, w), dx).expect("col2im shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel();
        let (oh, ow) = conv.output_size(h, w);
        let mut y = Array3::zeros((conv.out_channels(), oh, ow));
        for o in 0..conv.out_channels() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[[o]]);
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight[[o, ci, ki, kj]] * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[o, oy, ox]] = acc;
                }
            }
        }
        y
    }

    fn random_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_for_several_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, s, p, h) in &[(3, 5, 3, 1, 1, 7), (2, 4, 2, 2, 0, 9), (3, 2, 4, 4, 0, 16), (1, 1, 1, 1, 0, 3)] {
            let mut conv = Conv2d::new(cin, cout, k, s, p, true, 1.0, &mut rng);
            conv.bias.as_mut().unwrap().mapv_inplace(|_| 0.3);
            let x = random_input(&mut rng, cin, h, h);
            let fast = conv.forward(&x);
            let slow = naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_kernel_two_floors_odd_sizes() {
        let conv = Conv2d::zeros(1, 1, 2, 2, 0, false);
        assert_eq!(conv.output_size(7, 7), (3, 3));
        assert_eq!(conv.output_size(56, 56), (28, 28));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::new(2, 3, 3, 2, 1, true, 1.0, &mut rng);
        let x = random_input(&mut rng, 2, 6, 5);
        let (y, cache) = conv.forward_cached(&x);
        // loss = sum(y * r) for a fixed random r
        let r = random_input(&mut rng, y.dim().0, y.dim().1, y.dim().2);
        let mut grad = zeros_like(&conv);
        let dx = conv.backward(&cache, &r, &mut grad, true).unwrap();
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x) * &r).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 1, 2], [2, 1, 0, 0], [1, 1, 2, 2]] {
            let mut cp = conv.clone();
            cp.weight[idx] += eps;
            let mut cm = conv.clone();
            cm.weight[idx] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((num - grad.weight[idx]).abs() < 1e-6, "{num} vs {}", grad.weight[idx]);
        }
        for idx in [[0, 0, 0], [1, 3, 4], [0, 5, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-6);
        }
        let db_expected: f64 = r.index_axis(Axis(0), 1).sum();
        assert!((grad.bias.as_ref().unwrap()[[1]] - db_expected).abs() < 1e-12);
    }
}
