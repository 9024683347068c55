//! Classic momentum SGD with weight decay and the three-phase step
//! schedule.

use thiserror::Error;

use crate::model::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            base_lr: 1e-3,
        }
    }
}

/// Base learning rate for 60% of the run, a tenth for the next 30%, a
/// hundredth for the final 10%.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    if frac < 0.6 {
        base_lr
    } else if frac < 0.9 {
        base_lr * 0.1
    } else {
        base_lr * 0.01
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("non-finite gradient in parameter {0}; step aborted")]
    NonFiniteGrad(String),
}

/// Velocity state per parameter, aligned with [`ParamSet`] entry order.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamSet) -> Self {
        let velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Sgd { config, velocity }
    }

    /// v <- mu*v + g + lambda*w;  w <- w - lr*v
    ///
    /// `grads` follows the parameter order; `None` entries (parameters the
    /// loss never touched) contribute zero gradient but still decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<(), StepError> {
        assert_eq!(grads.len(), self.velocity.len(), "gradient count mismatch");
        for (g, (name, _)) in grads.iter().zip(params.iter()) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(StepError::NonFiniteGrad(name.clone()));
                }
            }
        }
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for (k, (_, tensor)) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[k];
            let w = tensor.data_mut();
            match &grads[k] {
                Some(g) => {
                    for i in 0..w.len() {
                        v[i] = mu * v[i] + g[i] + wd * w[i];
                        w[i] -= lr * v[i];
                    }
                }
                None => {
                    for i in 0..w.len() {
                        v[i] = mu * v[i] + wd * w[i];
                        w[i] -= lr * v[i];
                    }
                }
            }
        }
        Ok(())
    }
}
