use super::ParamSet;
use crate::ndgraph::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment descent over every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new<P: ParamSet + ?Sized>(cfg: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Tensor> = params.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Moves `params` against `grads` (given in `ParamSet` order).
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Tensor]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let tensors = params.params_mut();
        assert_eq!(tensors.len(), grads.len(), "gradient count does not match parameters");
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape does not match parameter");
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
