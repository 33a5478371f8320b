use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, in the usual fused form
/// `p -= (lr / c1) * m / (sqrt(v) / sqrt(c2) + eps)` where `ck = 1 - beta_k^t`.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Array2<T>]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<T>], grads: &[Array2<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "adam_step",
                reason: format!(
                    "{} params / {} grads for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dim() != m.dim() || g.dim() != m.dim() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    left: p.dim(),
                    right: g.dim(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of_f64(c.beta1);
        let b2 = T::of_f64(c.beta2);
        let one = T::one();
        let step_size = T::of_f64(c.lr / (1.0 - c.beta1.powi(t)));
        let sqrt_correction2 = T::of_f64((1.0 - c.beta2.powi(t)).sqrt());
        let eps = T::of_f64(c.eps);
        for i in 0..params.len() {
            let g = grads[i].as_standard_layout();
            let g = g.as_slice().expect("standard layout");
            let p = params[i].as_slice_mut().expect("parameters are standard layout");
            let m = self.m[i].as_slice_mut().expect("standard layout");
            let v = self.v[i].as_slice_mut().expect("standard layout");
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let denom = v.sqrt() / sqrt_correction2 + eps;
                *p = *p - step_size * *m / denom;
            }
        }
        Ok(())
    }
}
