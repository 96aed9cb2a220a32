//! Named, shaped parameter arrays with gradients.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Which model a parameter store belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Encoder,
    Denoiser,
}

impl Owner {
    pub fn tag(self) -> u8 {
        match self {
            Owner::Encoder => 0,
            Owner::Denoiser => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Owner::Encoder),
            1 => Some(Owner::Denoiser),
            _ => None,
        }
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Owner::Encoder => "encoder",
            Owner::Denoiser => "denoiser",
        })
    }
}

/// Handle to one array inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub owner: Owner,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of trainable arrays owned by one model.
///
/// Insertion order is preserved; checkpoints and optimizer state rely on it.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    owner: Owner,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    frozen: bool,
}

impl ParameterStore {
    pub fn new(owner: Owner) -> Self {
        Self {
            owner,
            params: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
        }
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    /// Registers a new array. Panics on a duplicate name, which is a
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let index = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), index);
        ParamId {
            owner: self.owner,
            index,
        }
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId {
            owner: self.owner,
            index,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            owner: self.owner,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        debug_assert_eq!(id.owner, self.owner);
        &self.params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        debug_assert_eq!(id.owner, self.owner);
        &mut self.params[id.index].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.get(id).grad
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients, scaled by `scale`.
    pub fn accumulate(&mut self, grads: &super::Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            if id.owner != self.owner {
                continue;
            }
            let dst = &mut self.params[id.index].grad;
            for (d, v) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * v;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bitwise snapshot of every value, for freeze assertions.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}
