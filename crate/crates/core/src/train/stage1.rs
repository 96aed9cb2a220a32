use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{bce_loss, label_vector};
use super::{epoch_seed, EpochLog, Stage1Config, TrainError};
use crate::autodiff::{clip_grad_norm, cosine_lr, Adam, AdamConfig, Gradients, Graph, Tensor, TensorError};
use crate::encoder::Encoder;
use crate::eval::{metrics, rank_split, Metrics};
use crate::kg::{KnowledgeGraph, Split, Subgraph};

pub struct Stage1Outcome {
    /// Parameters from the epoch with the best dev Hits@1 (the last epoch
    /// when there is no dev split).
    pub encoder: Encoder,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev: Option<Metrics>,
}

/// Filtered dev metrics of the encoder's own scores.
pub(crate) fn encoder_dev_metrics(kg: &KnowledgeGraph, encoder: &Encoder) -> Result<Option<Metrics>, TrainError> {
    if kg.split(Split::Dev).is_empty() {
        return Ok(None);
    }
    let ranks = rank_split(kg, Split::Dev, false, |h, r| -> Result<Vec<f64>, TrainError> {
        Ok(encoder.infer(kg, h, r)?.0)
    })?;
    Ok(Some(metrics(&ranks)?))
}

fn diverged(epoch: usize, batch: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::Diverged {
            stage: "encoder",
            epoch,
            batch,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Trains the encoder on multi-label binary cross-entropy over training
/// queries. Calls `on_epoch` after each epoch with its log line.
pub fn stage1_train(
    kg: &KnowledgeGraph,
    mut encoder: Encoder,
    cfg: &Stage1Config,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Stage1Outcome, TrainError> {
    cfg.validate()?;
    if encoder.store().is_frozen() {
        return Err(TrainError::Config("encoder store is frozen".into()));
    }
    let queries = kg.queries(Split::Train);
    if queries.is_empty() {
        return Err(TrainError::NoQueries);
    }
    let n = kg.num_entities();
    let subgraphs: Vec<Subgraph> = queries
        .par_iter()
        .map(|&(h, r)| encoder.subgraph(kg, h, r))
        .collect::<Result<_, _>>()?;
    let labels: Vec<Tensor> = queries
        .iter()
        .map(|&(h, r)| label_vector(n, kg.train_tails(h, r), cfg.label_smoothing))
        .collect();

    let steps_per_epoch = queries.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(encoder.store(), AdamConfig::default());
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Encoder, usize, Option<Metrics>)> = None;
    let mut order: Vec<usize> = (0..queries.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, 1, epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)?;
            let enc = &encoder;
            let results: Vec<(f64, Gradients)> = chunk
                .par_iter()
                .map(|&qi| -> Result<_, TrainError> {
                    let mut g = Graph::new();
                    let out = enc.forward(&mut g, kg, &subgraphs[qi], None)?;
                    let loss = bce_loss(&mut g, out.scores, &labels[qi])?;
                    let value = g.value(loss).item();
                    Ok((value, g.backward(loss)?))
                })
                .collect::<Result<_, _>>()
                .map_err(|e| diverged(epoch, batch, e))?;

            let store = encoder.store_mut();
            store.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for (value, grads) in &results {
                loss_sum += value;
                store.accumulate(grads, scale);
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(store, cfg.grad_clip);
            }
            adam.step(store, lr)?;
            step += 1;
        }
        let loss = loss_sum / queries.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                stage: "encoder",
                epoch,
                batch: steps_per_epoch,
                detail: format!("epoch loss {loss}"),
            });
        }

        let dev = encoder_dev_metrics(kg, &encoder)?;
        let entry = EpochLog {
            epoch,
            stage: "encoder",
            loss,
            bce: Some(loss),
            kl: None,
            dev,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);

        let improved = match (&best, &dev) {
            (None, _) => true,
            (Some((_, _, Some(b))), Some(d)) => d.hits1 > b.hits1 || (d.hits1 == b.hits1 && d.mr < b.mr),
            (Some(_), None) => true,
            (Some((_, _, None)), Some(_)) => true,
        };
        if improved {
            best = Some((encoder.clone(), epoch, dev));
        }
    }

    let (encoder, best_epoch, best_dev) = best.expect("at least one epoch ran");
    Ok(Stage1Outcome {
        encoder,
        log,
        best_epoch,
        best_dev,
    })
}
