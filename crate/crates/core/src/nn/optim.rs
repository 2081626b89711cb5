use super::{Module, Tensor, TensorKind};

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every trainable tensor in `model` from the matching tensor in `grads`.
    pub fn step<M: Module>(&mut self, model: &mut M, grads: &M) {
        let mut gs: Vec<&Tensor> = Vec::new();
        grads.visit("", &mut |_, kind, t| {
            if kind == TensorKind::Param {
                gs.push(t);
            }
        });
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), gs.len(), "optimizer bound to a different model");
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut("", &mut |_, kind, p| {
            if kind != TensorKind::Param {
                return;
            }
            let g = gs[i];
            let m = &mut ms[i];
            let v = &mut vs[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            i += 1;
        });
    }
}
