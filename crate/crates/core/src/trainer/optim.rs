use crate::policy::{Gradient, PolicyParams};

use super::config::{OptimizerConfig, OptimizerKind};

/// Minimizing optimizer over the trainable entries of a parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        let (m, v) = match config.kind {
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { config, m, v, t: 0 }
    }

    /// Takes one descent step on `grad` (a loss gradient) and returns the new
    /// snapshot together with the gradient norm before clipping.
    pub fn step(&mut self, params: &PolicyParams, grad: &Gradient) -> (PolicyParams, f64) {
        let mut g = grad.clone();
        params.mask_gradient(&mut g);
        let norm = g.norm();
        if let Some(max) = self.config.max_grad_norm {
            if norm > max {
                g.scale(max / norm);
            }
        }
        let lr = self.config.lr;
        let delta = match self.config.kind {
            OptimizerKind::Sgd => {
                let mut d = g;
                d.scale(-lr);
                d
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                let mut d = Gradient::zeros(g.0.len());
                for i in params.trainable_indices() {
                    let gi = g.0[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    d.0[i] = -lr * mh / (vh.sqrt() + self.config.eps);
                }
                d
            }
        };
        (params.apply_update(&delta), norm)
    }
}
