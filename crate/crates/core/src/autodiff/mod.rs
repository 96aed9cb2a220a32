//! Minimal reverse-mode differentiation over dense `f64` arrays, plus the
//! optimizer used by both training stages.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{bce_logit_term, log_softmax_rows, sigmoid_scalar, softmax_rows};
pub use optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig, OptimError};
pub use params::{Owner, Param, ParamId, ParameterStore};
pub use tensor::{Tensor, TensorError};

/// Affine map `x · W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Registers `name.weight` (scaled Gaussian) and `name.bias` (zeros).
    pub fn new<R: rand::Rng>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_normal(&format!("{name}.weight"), &[fan_in, fan_out], std, rng);
        let bias = bias.then(|| store.add_zeros(&format!("{name}.bias"), &[fan_out]));
        Self { weight, bias }
    }

    /// Same layout with every weight and bias zero.
    pub fn zeros(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add_zeros(&format!("{name}.weight"), &[fan_in, fan_out]);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), &[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}
