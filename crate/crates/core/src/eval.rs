//! Ranking metrics, split evaluation and diffusion trajectory export.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, DenoiserError};
use crate::diffusion::{chain_rng, generate, run_chains, DiffusionError, NoiseSchedule};
use crate::encoder::{Encoder, EncoderError};
use crate::kg::{KnowledgeGraph, Split};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("gold entity {0} is masked out of the candidate set")]
    GoldMasked(usize),
    #[error("gold entity {gold} out of range for {n} candidates")]
    GoldOutOfRange { gold: usize, n: usize },
    #[error("mask length {mask} does not match {scores} scores")]
    MaskLength { mask: usize, scores: usize },
    #[error("no ranks to summarize")]
    Empty,
}

/// Rank of `gold` among the kept candidates: one plus the number of other
/// kept entities scoring at least as high. Ties count against gold.
pub fn rank_of(scores: &[f64], gold: usize, mask: Option<&[bool]>) -> Result<usize, EvalError> {
    if gold >= scores.len() {
        return Err(EvalError::GoldOutOfRange { gold, n: scores.len() });
    }
    if let Some(m) = mask {
        if m.len() != scores.len() {
            return Err(EvalError::MaskLength {
                mask: m.len(),
                scores: scores.len(),
            });
        }
        if !m[gold] {
            return Err(EvalError::GoldMasked(gold));
        }
    }
    let target = scores[gold];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gold && mask.is_none_or(|m| m[i]) && s >= target)
        .count();
    Ok(1 + above)
}

/// Mean rank and Hits@{1,3,10}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn hits(ranks: &[usize], k: usize) -> f64 {
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MR={:.3} Hits@1={:.4} Hits@3={:.4} Hits@10={:.4} (n={})",
            self.mr, self.hits1, self.hits3, self.hits10, self.count
        )
    }
}

pub fn metrics(ranks: &[usize]) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let mr = ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64;
    Ok(Metrics {
        mr,
        hits1: Metrics::hits(ranks, 1),
        hits3: Metrics::hits(ranks, 3),
        hits10: Metrics::hits(ranks, 10),
        count: ranks.len(),
    })
}

/// Ranks every triple of `split` under `score`, which is called once per
/// distinct `(head, relation)` query. Queries are scored in parallel; ranks
/// come back in triple order.
pub fn rank_split<F, E>(kg: &KnowledgeGraph, split: Split, raw: bool, score: F) -> Result<Vec<usize>, E>
where
    F: Fn(usize, usize) -> Result<Vec<f64>, E> + Sync,
    E: From<EvalError> + Send,
{
    let queries = kg.queries(split);
    let scored: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|&(h, r)| score(h, r))
        .collect::<Result<_, E>>()?;
    let lookup: HashMap<(usize, usize), &[f64]> =
        queries.iter().copied().zip(scored.iter().map(Vec::as_slice)).collect();
    kg.split(split)
        .iter()
        .map(|t| {
            let s = lookup[&(t.head, t.relation)];
            let mask = (!raw).then(|| kg.filtered_candidates(t.head, t.relation, t.tail));
            Ok(rank_of(s, t.tail, mask.as_deref())?)
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("generated scores requested but no denoiser was supplied")]
    MissingDenoiser,
    #[error("split {0} has no triples")]
    EmptySplit(Split),
    #[error("entity {0} out of range")]
    BadQuery(usize),
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Where ranking scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// The encoder's conditional scores.
    Encoder,
    /// The mean of reverse diffusion chains under the encoder's condition.
    Generated,
}

impl ScoreSource {
    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::Encoder => "encoder-x0",
            ScoreSource::Generated => "generated-x0",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sources: Vec<ScoreSource>,
    pub split: Split,
    /// Rank against every entity instead of filtering known tails.
    pub raw: bool,
    /// Weight of the encoder's scores mixed into generated scores; 0 ranks
    /// by generated scores alone.
    pub blend: f64,
    pub seed: u64,
    /// Entities kept per step in trajectory files.
    pub trajectory_top: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sources: vec![ScoreSource::Encoder, ScoreSource::Generated],
            split: Split::Test,
            raw: false,
            blend: 0.0,
            seed: 0,
            trajectory_top: 32,
        }
    }
}

/// Seed of the generation chains for one query; independent of the order
/// in which queries are processed.
pub fn query_seed(seed: u64, head: usize, relation: usize) -> u64 {
    let mut z = seed ^ ((head as u64) << 32) ^ (relation as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generated scores for one condition: the mean of `chains` reverse chains.
pub fn generated_scores(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &[f64],
    chains: usize,
    seed: u64,
) -> Result<Vec<f64>, DiffusionError> {
    let model = |xs: &[Vec<f64>], k: usize| denoiser.predict_batch(xs, k, cond);
    generate(schedule, denoiser.n_entities(), &model, chains, seed)
}

/// Denoiser plus the schedule and chain count used to sample from it.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub chains: usize,
}

/// Score vector of one query under `source`.
pub fn query_scores(
    kg: &KnowledgeGraph,
    encoder: &Encoder,
    generator: Option<Generator<'_>>,
    source: ScoreSource,
    head: usize,
    relation: usize,
    cfg: &EvalConfig,
) -> Result<Vec<f64>, EvaluateError> {
    let (x0, cond) = encoder.infer(kg, head, relation)?;
    match source {
        ScoreSource::Encoder => Ok(x0),
        ScoreSource::Generated => {
            let gen = generator.ok_or(EvaluateError::MissingDenoiser)?;
            let mut s = generated_scores(gen.denoiser, gen.schedule, &cond, gen.chains, query_seed(cfg.seed, head, relation))?;
            if cfg.blend != 0.0 {
                for (v, e) in s.iter_mut().zip(&x0) {
                    *v = (1.0 - cfg.blend) * *v + cfg.blend * e;
                }
            }
            Ok(s)
        }
    }
}

/// One labeled metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub source: ScoreSource,
    pub split: Split,
    pub metrics: Metrics,
}

/// Ranks `cfg.split` under each configured source.
pub fn evaluate(
    kg: &KnowledgeGraph,
    encoder: &Encoder,
    generator: Option<Generator<'_>>,
    cfg: &EvalConfig,
) -> Result<Vec<ReportRow>, EvaluateError> {
    if kg.split(cfg.split).is_empty() {
        return Err(EvaluateError::EmptySplit(cfg.split));
    }
    if generator.is_none() && cfg.sources.contains(&ScoreSource::Generated) {
        return Err(EvaluateError::MissingDenoiser);
    }
    cfg.sources
        .iter()
        .map(|&source| {
            let ranks = rank_split(kg, cfg.split, cfg.raw, |h, r| query_scores(kg, encoder, generator, source, h, r, cfg))?;
            Ok(ReportRow {
                source,
                split: cfg.split,
                metrics: metrics(&ranks)?,
            })
        })
        .collect()
}

pub const REPORT_HEADER: &str = "source\tsplit\tMR\tHits@1\tHits@3\tHits@10\tqueries";

/// Tab-separated report with a header line.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            r.source.name(),
            r.split,
            m.mr,
            m.hits1,
            m.hits3,
            m.hits10,
            m.count
        ));
    }
    out
}

/// Running reconstruction of one seeded reverse chain for `(head,
/// relation)`: `(step, scores)` for `k = K..1`, then the final sample at
/// step 0.
pub fn trajectory(
    kg: &KnowledgeGraph,
    encoder: &Encoder,
    generator: Generator<'_>,
    head: usize,
    relation: usize,
    seed: u64,
) -> Result<Vec<(usize, Vec<f64>)>, EvaluateError> {
    let (_, cond) = encoder.infer(kg, head, relation)?;
    let model = |xs: &[Vec<f64>], k: usize| generator.denoiser.predict_batch(xs, k, &cond);
    let mut snaps = Vec::with_capacity(generator.schedule.steps() + 1);
    run_chains(
        generator.schedule,
        generator.denoiser.n_entities(),
        &model,
        &mut [chain_rng(query_seed(seed, head, relation), 0)],
        Some(&mut snaps),
    )?;
    Ok(snaps)
}

/// The entities exported per step: the `top` best at step 0, with the gold
/// entity replacing the last slot when it is not among them. Sorted by
/// entity id.
pub fn trajectory_entities(final_scores: &[f64], gold: usize, top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..final_scores.len()).collect();
    idx.sort_by(|&a, &b| final_scores[b].total_cmp(&final_scores[a]).then(a.cmp(&b)));
    idx.truncate(top.max(1).min(final_scores.len()));
    if !idx.contains(&gold) {
        *idx.last_mut().unwrap() = gold;
    }
    idx.sort_unstable();
    idx
}

pub const TRAJECTORY_HEADER: &str = "query_id,step,entity_id,score,is_gold";

/// Writes CSV rows `query_id,step,entity_id,score,is_gold` for the chosen
/// entities at every snapshot.
pub fn write_trajectory<W: Write>(
    w: &mut W,
    query_id: &str,
    snaps: &[(usize, Vec<f64>)],
    entities: &[usize],
    entity_names: &[String],
    gold: usize,
) -> std::io::Result<()> {
    for (step, scores) in snaps {
        for &e in entities {
            writeln!(w, "{query_id},{step},{},{:?},{}", entity_names[e], scores[e], u8::from(e == gold))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ranks_first() {
        assert_eq!(rank_of(&[0.9, 0.5, 0.1], 0, None).unwrap(), 1);
        assert_eq!(rank_of(&[0.9, 0.5, 0.1], 2, None).unwrap(), 3);
    }

    #[test]
    fn ties_are_pessimistic() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 0, None).unwrap(), 2);
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 1, None).unwrap(), 2);
    }

    #[test]
    fn masked_competitors_do_not_count() {
        let mask = [true, false, true];
        assert_eq!(rank_of(&[0.1, 0.9, 0.0], 0, Some(&mask)).unwrap(), 1);
        assert_eq!(rank_of(&[0.1, 0.9, 0.0], 1, Some(&mask)), Err(EvalError::GoldMasked(1)));
    }

    #[test]
    fn hand_built_metrics() {
        let m = metrics(&[1, 3, 5]).unwrap();
        assert_eq!(m.mr, 3.0);
        assert_eq!(m.hits1, 1.0 / 3.0);
        assert_eq!(m.hits3, 2.0 / 3.0);
        assert_eq!(m.hits10, 1.0);
        let p = metrics(&[1, 1, 1, 1]).unwrap();
        assert_eq!((p.mr, p.hits1, p.hits3, p.hits10), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(metrics(&[]), Err(EvalError::Empty));
    }
}
