use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{bce_loss, kl_loss, label_vector};
use super::{epoch_seed, EpochLog, Stage2Config, TrainError};
use crate::autodiff::{clip_grad_norm, cosine_lr, Adam, AdamConfig, Graph, Tensor, TensorError};
use crate::denoiser::{Denoiser, DenoiserError};
use crate::diffusion::{standard_normal, NoiseSchedule};
use crate::encoder::Encoder;
use crate::eval::{metrics, query_scores, rank_split, EvalConfig, EvaluateError, Generator, Metrics, ScoreSource};
use crate::kg::{KnowledgeGraph, Split};

pub struct Stage2Outcome {
    pub denoiser: Denoiser,
    pub log: Vec<EpochLog>,
}

/// Frozen encoder outputs for one training query.
struct Cached {
    x0: Vec<f64>,
    cond: Vec<f64>,
    y: Tensor,
}

fn diverged(epoch: usize, batch: usize, e: TrainError) -> TrainError {
    let detail = e.to_string();
    match e {
        TrainError::Tensor(TensorError::NonFinite { .. })
        | TrainError::Denoiser(DenoiserError::NonFiniteBlock { .. } | DenoiserError::NonFiniteOutput) => {
            TrainError::Diverged {
                stage: "denoiser",
                epoch,
                batch,
                detail,
            }
        }
        other => other,
    }
}

/// Filtered dev metrics of generated scores.
pub(crate) fn generated_dev_metrics(
    kg: &KnowledgeGraph,
    encoder: &Encoder,
    generator: Generator<'_>,
    seed: u64,
) -> Result<Option<Metrics>, TrainError> {
    if kg.split(Split::Dev).is_empty() {
        return Ok(None);
    }
    let cfg = EvalConfig {
        seed,
        ..Default::default()
    };
    let ranks = rank_split(kg, Split::Dev, false, |h, r| -> Result<_, EvaluateError> {
        query_scores(kg, encoder, Some(generator), ScoreSource::Generated, h, r, &cfg)
    })?;
    Ok(Some(metrics(&ranks)?))
}

/// Trains the denoiser to reconstruct the frozen encoder's scores from a
/// single noised copy at a uniformly drawn step. `chains` is the number of
/// reverse chains used for periodic dev evaluation.
#[allow(clippy::too_many_arguments)]
pub fn stage2_train(
    kg: &KnowledgeGraph,
    encoder: &Encoder,
    mut denoiser: Denoiser,
    schedule: &NoiseSchedule,
    chains: usize,
    cfg: &Stage2Config,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Stage2Outcome, TrainError> {
    cfg.validate()?;
    if denoiser.steps() != schedule.steps() {
        return Err(TrainError::Config(format!(
            "denoiser built for {} steps, schedule has {}",
            denoiser.steps(),
            schedule.steps()
        )));
    }
    if denoiser.n_entities() != kg.num_entities() || denoiser.cond_dim() != encoder.dim() {
        return Err(TrainError::Config("denoiser sizes do not match the graph and encoder".into()));
    }
    let queries = kg.queries(Split::Train);
    if queries.is_empty() {
        return Err(TrainError::NoQueries);
    }
    let frozen = encoder.store().fingerprint();
    let n = kg.num_entities();
    let d = encoder.dim();
    let cache: Vec<Cached> = queries
        .par_iter()
        .map(|&(h, r)| -> Result<Cached, TrainError> {
            let (x0, cond) = encoder.infer(kg, h, r)?;
            Ok(Cached {
                x0,
                cond,
                y: label_vector(n, kg.train_tails(h, r), cfg.label_smoothing),
            })
        })
        .collect::<Result<_, _>>()?;

    let steps_per_epoch = queries.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(denoiser.store(), AdamConfig::default());
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let kmax = schedule.steps();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, 2, epoch));
        order.shuffle(&mut rng);
        let (mut kl_sum, mut bce_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut lr = cfg.lr;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)?;
            let rows = chunk.len() * cfg.samples_per_query;
            let (mut xk, mut conds, mut x0s, mut ys) = (
                Vec::with_capacity(rows * n),
                Vec::with_capacity(rows * d),
                Vec::with_capacity(rows * n),
                Vec::with_capacity(rows * n),
            );
            let (mut ks, mut a, mut b) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
            for &qi in chunk {
                let c = &cache[qi];
                for _ in 0..cfg.samples_per_query {
                    let k = rng.gen_range(1..=kmax);
                    let eps = standard_normal(&mut rng, n);
                    xk.extend(schedule.q_sample(&c.x0, k, &eps)?);
                    conds.extend_from_slice(&c.cond);
                    x0s.extend_from_slice(&c.x0);
                    ys.extend_from_slice(c.y.data());
                    let ab = schedule.alpha_bar(k);
                    ks.push(k);
                    a.push(1.0 / ab.sqrt());
                    b.push((1.0 / ab - 1.0).sqrt());
                }
            }

            let (kl, bce) = (|| -> Result<(Option<f64>, Option<f64>), TrainError> {
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![rows, n], xk)?)?;
                let c = g.constant(Tensor::new(vec![rows, d], conds)?)?;
                let eps_hat = denoiser.denoise(&mut g, x, &ks, c, None)?;
                // x̂₀ = a·x̂_k − b·ε̂ row by row
                let av = g.constant(Tensor::new(vec![rows, 1], a)?)?;
                let bv = g.constant(Tensor::new(vec![rows, 1], b)?)?;
                let xa = g.mul(x, av)?;
                let eb = g.mul(eps_hat, bv)?;
                let x0_hat = g.sub(xa, eb)?;
                let mut terms = Vec::new();
                let kl = if cfg.no_kl {
                    None
                } else {
                    let t = kl_loss(&mut g, &Tensor::new(vec![rows, n], x0s)?, x0_hat, cfg.kl_kind)?;
                    terms.push(t);
                    Some(g.value(t).item())
                };
                let bce = if cfg.no_bce {
                    None
                } else {
                    let t = bce_loss(&mut g, x0_hat, &Tensor::new(vec![rows, n], ys)?)?;
                    terms.push(t);
                    Some(g.value(t).item())
                };
                let loss = match terms[..] {
                    [t] => t,
                    [t, u] => g.add(t, u)?,
                    _ => unreachable!("validated: at least one term"),
                };
                let grads = g.backward(loss)?;
                let store = denoiser.store_mut();
                store.zero_grad();
                store.accumulate(&grads, 1.0);
                Ok((kl, bce))
            })()
            .map_err(|e| diverged(epoch, batch, e))?;

            let store = denoiser.store_mut();
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(store, cfg.grad_clip);
            }
            adam.step(store, lr)?;
            step += 1;
            kl_sum += kl.unwrap_or(0.0);
            bce_sum += bce.unwrap_or(0.0);
            batches += 1;
        }
        if encoder.store().fingerprint() != frozen {
            return Err(TrainError::EncoderMutated);
        }

        let kl = (!cfg.no_kl).then(|| kl_sum / batches as f64);
        let bce = (!cfg.no_bce).then(|| bce_sum / batches as f64);
        let loss = kl.unwrap_or(0.0) + bce.unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                stage: "denoiser",
                epoch,
                batch: steps_per_epoch,
                detail: format!("epoch loss {loss}"),
            });
        }
        let evaluate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let dev = if evaluate {
            let generator = Generator {
                denoiser: &denoiser,
                schedule,
                chains,
            };
            generated_dev_metrics(kg, encoder, generator, seed)?
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            stage: "denoiser",
            loss,
            bce,
            kl,
            dev,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(Stage2Outcome { denoiser, log })
}
