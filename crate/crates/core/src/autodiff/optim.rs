//! Adam and the cosine learning-rate schedule.

use thiserror::Error;

use super::params::ParameterStore;
use super::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("optimizer state has {state} arrays but the store has {store}")]
    StateMismatch { state: usize, store: usize },
    #[error("cannot step a frozen {0} store")]
    Frozen(String),
    #[error("total_steps must be positive")]
    ZeroTotalSteps,
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("min_lr {min} exceeds base_lr {base}")]
    MinAboveBase { min: f64, base: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// Applies one bias-corrected Adam update using the store's gradients.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::BadLearningRate(lr));
        }
        if store.is_frozen() {
            return Err(OptimError::Frozen(store.owner().to_string()));
        }
        if self.first.len() != store.len() {
            return Err(OptimError::StateMismatch {
                state: self.first.len(),
                store: store.len(),
            });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> Result<f64, OptimError> {
    if total_steps == 0 {
        return Err(OptimError::ZeroTotalSteps);
    }
    if step > total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if min_lr > base_lr {
        return Err(OptimError::MinAboveBase {
            min: min_lr,
            base: base_lr,
        });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
