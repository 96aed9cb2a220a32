//! Conditional noise predictor.
//!
//! The condition embedding and the timestep are summed into one vector,
//! which regresses a scale, a shift and a residual gate for every block of
//! a pre-normalized MLP stack over the projected noisy scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Linear, Owner, ParamId, ParameterStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite activation in denoiser block {block}")]
    NonFiniteBlock { block: usize },
    #[error("non-finite denoiser output")]
    NonFiniteOutput,
    #[error("invalid denoiser config: {0}")]
    Config(String),
    #[error("step {k} outside 0..={max}")]
    Step { k: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepKind {
    /// Fixed sin/cos basis followed by a trainable linear map.
    #[default]
    Sinusoidal,
    /// One trainable row per step.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Residual stream width.
    pub hidden: usize,
    /// Inner width of each block's MLP.
    pub mlp: usize,
    pub blocks: usize,
    /// Replace the block stack by `in_proj(x) + condition`.
    pub no_block: bool,
    /// Feed zeros instead of the encoder's condition.
    pub no_condition: bool,
    /// Drop the regressed scale.
    pub no_scale: bool,
    /// Drop the regressed shift.
    pub no_shift: bool,
    pub timestep: TimestepKind,
    pub ln_eps: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            mlp: 128,
            blocks: 1,
            no_block: false,
            no_condition: false,
            no_scale: false,
            no_shift: false,
            timestep: TimestepKind::Sinusoidal,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
enum TimeEmbed {
    Sinusoidal(Linear),
    Table(ParamId),
}

#[derive(Debug, Clone)]
struct Block {
    ln_gain: ParamId,
    ln_bias: ParamId,
    mlp_in: Linear,
    mlp_out: Linear,
    scale: Option<Linear>,
    shift: Option<Linear>,
    gate: Linear,
}

/// Residual stream snapshots of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct DenoiseTrace {
    pub input: Option<Tensor>,
    /// Stream after each block.
    pub blocks: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParameterStore,
    n_entities: usize,
    cond_dim: usize,
    steps: usize,
    in_proj: Linear,
    cond_proj: Linear,
    time: TimeEmbed,
    cond_out: Linear,
    blocks: Vec<Block>,
    ln_gain: ParamId,
    ln_bias: ParamId,
    out: Linear,
}

/// Raw sin/cos features of step `k`: component `2i` is
/// `sin(k / 10000^(2i/dim))`, component `2i+1` the matching cosine.
pub fn sinusoidal(k: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = k as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn non_finite_in(e: TensorError, block: usize) -> DenoiserError {
    match e {
        TensorError::NonFinite { .. } => DenoiserError::NonFiniteBlock { block },
        other => other.into(),
    }
}

impl Denoiser {
    /// `n_entities` is the score-vector length, `cond_dim` the encoder
    /// width and `steps` the diffusion length K.
    pub fn new(config: DenoiserConfig, n_entities: usize, cond_dim: usize, steps: usize, seed: u64) -> Result<Self, DenoiserError> {
        if config.hidden == 0 || config.mlp == 0 || n_entities == 0 || cond_dim == 0 {
            return Err(DenoiserError::Config("widths and sizes must be positive".into()));
        }
        if config.blocks == 0 && !config.no_block {
            return Err(DenoiserError::Config("at least one block is required".into()));
        }
        let dh = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(Owner::Denoiser);
        let in_proj = Linear::new(&mut store, "in_proj", n_entities, dh, true, &mut rng);
        let cond_proj = Linear::new(&mut store, "cond_proj", cond_dim, dh, true, &mut rng);
        let time = match config.timestep {
            TimestepKind::Sinusoidal => TimeEmbed::Sinusoidal(Linear::new(&mut store, "time_proj", dh, dh, true, &mut rng)),
            TimestepKind::Table => TimeEmbed::Table(store.add_normal("time_table", &[steps + 1, dh], 1.0, &mut rng)),
        };
        let cond_out = Linear::new(&mut store, "cond_out", dh, dh, true, &mut rng);
        let n_blocks = if config.no_block { 0 } else { config.blocks };
        let blocks = (0..n_blocks)
            .map(|b| {
                let p = format!("block{b}");
                Block {
                    ln_gain: store.add(&format!("{p}.ln.gain"), Tensor::full(&[dh], 1.0)),
                    ln_bias: store.add_zeros(&format!("{p}.ln.bias"), &[dh]),
                    mlp_in: Linear::new(&mut store, &format!("{p}.mlp_in"), dh, config.mlp, true, &mut rng),
                    mlp_out: Linear::new(&mut store, &format!("{p}.mlp_out"), config.mlp, dh, true, &mut rng),
                    scale: (!config.no_scale).then(|| Linear::zeros(&mut store, &format!("{p}.scale"), dh, dh)),
                    shift: (!config.no_shift).then(|| Linear::zeros(&mut store, &format!("{p}.shift"), dh, dh)),
                    gate: Linear::zeros(&mut store, &format!("{p}.gate"), dh, dh),
                }
            })
            .collect();
        let ln_gain = store.add("out.ln.gain", Tensor::full(&[dh], 1.0));
        let ln_bias = store.add_zeros("out.ln.bias", &[dh]);
        let out = Linear::new(&mut store, "out", dh, n_entities, true, &mut rng);
        Ok(Self {
            config,
            store,
            n_entities,
            cond_dim,
            steps,
            in_proj,
            cond_proj,
            time,
            cond_out,
            blocks,
            ln_gain,
            ln_bias,
            out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Zeroes the output projection so every prediction is exactly zero.
    pub fn zero_output(&mut self) {
        self.store.value_mut(self.out.weight).fill(0.0);
        if let Some(b) = self.out.bias {
            self.store.value_mut(b).fill(0.0);
        }
    }

    /// Timestep embeddings for each row's step, `[B, d_h]`.
    pub fn timestep_embed(&self, g: &mut Graph, ks: &[usize]) -> Result<Var, DenoiserError> {
        if let Some(&k) = ks.iter().find(|&&k| k > self.steps) {
            return Err(DenoiserError::Step { k, max: self.steps });
        }
        let dh = self.config.hidden;
        match &self.time {
            TimeEmbed::Sinusoidal(proj) => {
                let raw: Vec<f64> = ks.iter().flat_map(|&k| sinusoidal(k, dh)).collect();
                let raw = g.constant(Tensor::new(vec![ks.len(), dh], raw)?)?;
                Ok(proj.forward(g, &self.store, raw)?)
            }
            TimeEmbed::Table(table) => {
                let t = g.param(&self.store, *table)?;
                Ok(g.gather_rows(t, ks)?)
            }
        }
    }

    /// `Linear(project(condition) + timestep_embed(k))`, `[B, d_h]`.
    pub fn condition_embed(&self, g: &mut Graph, cond: Var, ks: &[usize]) -> Result<Var, DenoiserError> {
        let c = self.cond_proj.forward(g, &self.store, cond)?;
        let t = self.timestep_embed(g, ks)?;
        let s = g.add(c, t)?;
        Ok(self.cond_out.forward(g, &self.store, s)?)
    }

    fn affine_ln(&self, g: &mut Graph, h: Var, gain: ParamId, bias: ParamId) -> Result<Var, TensorError> {
        let u = g.layer_norm(h, self.config.ln_eps)?;
        let gain = g.param(&self.store, gain)?;
        let bias = g.param(&self.store, bias)?;
        let u = g.mul(u, gain)?;
        g.add(u, bias)
    }

    fn block_forward(&self, g: &mut Graph, block: &Block, h: Var, act: Var) -> Result<Var, TensorError> {
        let mut u = self.affine_ln(g, h, block.ln_gain, block.ln_bias)?;
        if let Some(scale) = &block.scale {
            let gamma = scale.forward(g, &self.store, act)?;
            let m = g.mul(u, gamma)?;
            u = g.add(u, m)?;
        }
        if let Some(shift) = &block.shift {
            let delta = shift.forward(g, &self.store, act)?;
            u = g.add(u, delta)?;
        }
        let z = block.mlp_in.forward(g, &self.store, u)?;
        let z = g.gelu(z)?;
        let z = block.mlp_out.forward(g, &self.store, z)?;
        let alpha = block.gate.forward(g, &self.store, act)?;
        let z = g.mul(z, alpha)?;
        g.add(h, z)
    }

    /// Predicted noise `[B, N]` for noisy scores `x` `[B, N]` at steps `ks`
    /// under conditions `cond` `[B, d]`.
    pub fn denoise(
        &self,
        g: &mut Graph,
        x: Var,
        ks: &[usize],
        cond: Var,
        mut trace: Option<&mut DenoiseTrace>,
    ) -> Result<Var, DenoiserError> {
        let cond = if self.config.no_condition {
            let shape = g.shape(cond).to_vec();
            g.constant(Tensor::zeros(&shape))?
        } else {
            cond
        };
        let ct = self.condition_embed(g, cond, ks)?;
        let mut h = self.in_proj.forward(g, &self.store, x)?;
        if let Some(t) = trace.as_deref_mut() {
            t.input = Some(g.value(h).clone());
            t.blocks.clear();
        }
        if self.config.no_block {
            h = g.add(h, ct)?;
        } else {
            let act = g.gelu(ct)?;
            for (b, block) in self.blocks.iter().enumerate() {
                h = self.block_forward(g, block, h, act).map_err(|e| non_finite_in(e, b))?;
                if let Some(t) = trace.as_deref_mut() {
                    t.blocks.push(g.value(h).clone());
                }
            }
        }
        let out = self
            .affine_ln(g, h, self.ln_gain, self.ln_bias)
            .and_then(|u| self.out.forward(g, &self.store, u))
            .map_err(|e| match e {
                TensorError::NonFinite { .. } => DenoiserError::NonFiniteOutput,
                other => other.into(),
            })?;
        Ok(out)
    }

    /// Pure prediction for several latents at the same step under one
    /// condition.
    pub fn predict_batch(&self, xs: &[Vec<f64>], k: usize, cond: &[f64]) -> Result<Vec<Vec<f64>>, DenoiserError> {
        let rows = xs.len();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![rows, self.n_entities], xs.concat())?)?;
        let cv = g.constant(Tensor::new(vec![rows, cond.len()], cond.repeat(rows))?)?;
        let eps = self.denoise(&mut g, xv, &vec![k; rows], cv, None)?;
        Ok(g.value(eps).data().chunks(self.n_entities).map(<[f64]>::to_vec).collect())
    }

    /// Pure single-vector prediction.
    pub fn predict(&self, x: &[f64], k: usize, cond: &[f64]) -> Result<Vec<f64>, DenoiserError> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::row(x.to_vec()))?;
        let cv = g.constant(Tensor::row(cond.to_vec()))?;
        let eps = self.denoise(&mut g, xv, &[k], cv, None)?;
        Ok(g.value(eps).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(g: &mut Graph, n: usize, d: usize, rows: usize) -> (Var, Var) {
        let x = Tensor::from_fn(&[rows, n], |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
        let c = Tensor::from_fn(&[rows, d], |i| ((i * 5 % 7) as f64 - 3.0) / 2.0);
        (g.constant(x).unwrap(), g.constant(c).unwrap())
    }

    #[test]
    fn zero_step_sinusoid() {
        let s = sinusoidal(0, 8);
        for (j, v) in s.iter().enumerate() {
            assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn timestep_embeddings_distinct() {
        let d = Denoiser::new(DenoiserConfig::default(), 10, 4, 40, 0).unwrap();
        let mut g = Graph::new();
        let ks: Vec<usize> = (1..=40).collect();
        let e = d.timestep_embed(&mut g, &ks).unwrap();
        let e = g.value(e);
        assert_eq!(e.shape(), &[40, d.config().hidden]);
        for a in 0..40 {
            for b in a + 1..40 {
                assert_ne!(e.row_slice(a), e.row_slice(b));
            }
        }
    }

    #[test]
    fn zero_gates_leave_stream_untouched() {
        for blocks in 1..=3 {
            let cfg = DenoiserConfig { blocks, ..Default::default() };
            let d = Denoiser::new(cfg, 12, 5, 40, blocks as u64).unwrap();
            let mut g = Graph::new();
            let (x, c) = inputs(&mut g, 12, 5, 3);
            let mut trace = DenoiseTrace::default();
            d.denoise(&mut g, x, &[1, 20, 40], c, Some(&mut trace)).unwrap();
            assert_eq!(trace.blocks.len(), blocks);
            let input = trace.input.unwrap();
            for h in &trace.blocks {
                assert_eq!(h.data(), input.data());
            }
        }
    }

    #[test]
    fn output_shape_for_any_config() {
        for (blocks, mlp, hidden) in [(1, 8, 4), (2, 16, 8), (3, 4, 6)] {
            let cfg = DenoiserConfig { blocks, mlp, hidden, ..Default::default() };
            let d = Denoiser::new(cfg, 9, 3, 10, 0).unwrap();
            let mut g = Graph::new();
            let (x, c) = inputs(&mut g, 9, 3, 2);
            let e = d.denoise(&mut g, x, &[3, 4], c, None).unwrap();
            assert_eq!(g.shape(e), &[2, 9]);
        }
    }

    #[test]
    fn zero_condition_and_step_gives_zero_embedding() {
        let mut d = Denoiser::new(DenoiserConfig::default(), 6, 3, 10, 0).unwrap();
        let TimeEmbed::Sinusoidal(tp) = d.time.clone() else { unreachable!() };
        d.store.value_mut(tp.weight).fill(0.0);
        let mut g = Graph::new();
        let c = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let ct = d.condition_embed(&mut g, c, &[0]).unwrap();
        assert!(g.value(ct).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_varies_with_step() {
        let d = Denoiser::new(DenoiserConfig::default(), 6, 3, 10, 0).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2, 3], 0.5)).unwrap();
        let ct = d.condition_embed(&mut g, c, &[2, 7]).unwrap();
        let v = g.value(ct);
        assert_ne!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut d = Denoiser::new(DenoiserConfig::default(), 6, 3, 10, 0).unwrap();
        d.zero_output();
        let e = d.predict(&[1.0; 6], 5, &[0.3, 0.2, 0.1]).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_condition_ignores_condition() {
        let cfg = DenoiserConfig { no_condition: true, ..Default::default() };
        let d = Denoiser::new(cfg, 6, 3, 10, 0).unwrap();
        let a = d.predict(&[1.0; 6], 5, &[0.3, 0.2, 0.1]).unwrap();
        let b = d.predict(&[1.0; 6], 5, &[-3.0, 2.0, 9.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_block_adds_condition_to_projection() {
        let cfg = DenoiserConfig { no_block: true, ..Default::default() };
        let d = Denoiser::new(cfg, 6, 3, 10, 0).unwrap();
        assert!(d.blocks.is_empty());
        let a = d.predict(&[1.0; 6], 5, &[0.3, 0.2, 0.1]).unwrap();
        let b = d.predict(&[1.0; 6], 5, &[-3.0, 2.0, 9.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn learned_table_timesteps() {
        let cfg = DenoiserConfig { timestep: TimestepKind::Table, ..Default::default() };
        let d = Denoiser::new(cfg, 6, 3, 10, 0).unwrap();
        assert_eq!(d.store().value(d.store().id("time_table").unwrap()).shape(), &[11, d.config().hidden]);
        let mut g = Graph::new();
        assert!(matches!(d.timestep_embed(&mut g, &[11]), Err(DenoiserError::Step { k: 11, max: 10 })));
    }

    #[test]
    fn condition_path_receives_gradient_once_gates_open() {
        let mut d = Denoiser::new(DenoiserConfig::default(), 6, 3, 10, 0).unwrap();
        // move the zero-initialized regressors off zero, as training does
        for name in ["block0.gate.bias", "block0.shift.weight"] {
            let id = d.store().id(name).unwrap();
            d.store_mut().value_mut(id).fill(0.1);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.5; 6])).unwrap();
        let c = g.constant(Tensor::row(vec![0.2, -0.1, 0.4])).unwrap();
        let e = d.denoise(&mut g, x, &[4], c, None).unwrap();
        let l = g.sum(e).unwrap();
        let base = g.value(l).item();
        // finite-difference probe on the condition
        let h = 1e-5;
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::row(vec![0.5; 6])).unwrap();
        let c2 = g2.constant(Tensor::row(vec![0.2 + h, -0.1, 0.4])).unwrap();
        let e2 = d.denoise(&mut g2, x2, &[4], c2, None).unwrap();
        let l2 = g2.sum(e2).unwrap();
        assert!(((g2.value(l2).item() - base) / h).abs() > 1e-8);
    }
}
