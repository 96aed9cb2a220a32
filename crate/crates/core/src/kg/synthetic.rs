//! Rule-generated graphs with known answers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{KgError, KnowledgeGraph, Triple, Vocab};
use crate::autodiff::Tensor;

/// How a rule maps a head index to its tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RuleKind {
    /// `tail = (head + shift) mod n`.
    ModularShift { shift: i64 },
    /// `tail = (sum - head) mod n`; an involution pairing entities.
    FixedPairing { sum: i64 },
    /// `tail = second(first(head))`, both named earlier in the rule list.
    Composition { first: String, second: String },
    /// Explicit tail per head; indices are not wrapped.
    Table { tails: Vec<i64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub relation: String,
    #[serde(flatten)]
    pub kind: RuleKind,
}

impl Rule {
    pub fn shift(relation: &str, shift: i64) -> Self {
        Self {
            relation: relation.into(),
            kind: RuleKind::ModularShift { shift },
        }
    }

    pub fn pairing(relation: &str, sum: i64) -> Self {
        Self {
            relation: relation.into(),
            kind: RuleKind::FixedPairing { sum },
        }
    }

    pub fn composition(relation: &str, first: &str, second: &str) -> Self {
        Self {
            relation: relation.into(),
            kind: RuleKind::Composition {
                first: first.into(),
                second: second.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub rules: Vec<Rule>,
    /// Width of the per-entity feature vectors; 0 disables features.
    pub feature_dim: usize,
    pub seed: u64,
}

/// The desk-scale graph: 120 entities under six deterministic rules, two
/// families of three synonymous pairings. Every held-out triple keeps
/// one-hop evidence through a synonym or the pairing's own inverse.
pub fn default_synthetic_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_entities: 120,
        rules: vec![
            Rule::pairing("mirror", 0),
            Rule::pairing("twin", 0),
            Rule::pairing("reflects", 0),
            Rule::pairing("partner", 1),
            Rule::pairing("spouse", 1),
            Rule::pairing("mate", 1),
        ],
        feature_dim: 16,
        seed: 0,
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        default_synthetic_spec()
    }
}

/// Evaluates every rule on every head, producing one tail table per rule.
pub fn rule_tables(n: usize, rules: &[Rule]) -> Result<Vec<Vec<usize>>, KgError> {
    let ni = n as i64;
    let mut tables: Vec<Vec<usize>> = Vec::with_capacity(rules.len());
    for (k, rule) in rules.iter().enumerate() {
        if rules[..k].iter().any(|r| r.relation == rule.relation) {
            return Err(KgError::BadRule(format!("duplicate relation {:?}", rule.relation)));
        }
        let lookup = |name: &str| {
            rules[..k]
                .iter()
                .position(|r| r.relation == name)
                .ok_or_else(|| {
                    KgError::BadRule(format!(
                        "{}: composition refers to {name:?}, which is not defined earlier",
                        rule.relation
                    ))
                })
        };
        let table: Vec<i64> = match &rule.kind {
            RuleKind::ModularShift { shift } => (0..ni).map(|h| (h + shift).rem_euclid(ni)).collect(),
            RuleKind::FixedPairing { sum } => (0..ni).map(|h| (sum - h).rem_euclid(ni)).collect(),
            RuleKind::Composition { first, second } => {
                let (a, b) = (lookup(first)?, lookup(second)?);
                (0..n).map(|h| tables[b][tables[a][h]] as i64).collect()
            }
            RuleKind::Table { tails } => {
                if tails.len() != n {
                    return Err(KgError::BadRule(format!(
                        "{}: table has {} entries for {n} entities",
                        rule.relation,
                        tails.len()
                    )));
                }
                tails.clone()
            }
        };
        if let Some((h, &t)) = table.iter().enumerate().find(|(_, &t)| t < 0 || t >= ni) {
            return Err(KgError::BadRule(format!(
                "{}: head {h} maps to out-of-range tail {t}",
                rule.relation
            )));
        }
        tables.push(table.into_iter().map(|t| t as usize).collect());
    }
    Ok(tables)
}

/// Enumerates all rule triples and splits them 80/10/10 after a seeded
/// shuffle. Features are unit-variance noise plus a one-hot of
/// `index mod feature_dim`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<KnowledgeGraph, KgError> {
    let n = spec.n_entities;
    if n < 4 {
        return Err(KgError::BadRule(format!("need at least 4 entities, got {n}")));
    }
    let tables = rule_tables(n, &spec.rules)?;
    let mut triples: Vec<Triple> = tables
        .iter()
        .enumerate()
        .flat_map(|(r, table)| table.iter().enumerate().map(move |(h, &t)| Triple::new(h, r, t)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    triples.shuffle(&mut rng);
    let total = triples.len();
    let n_train = total * 8 / 10;
    let n_dev = total / 10;
    let test = triples.split_off(n_train + n_dev);
    let dev = triples.split_off(n_train);

    let features = (spec.feature_dim > 0).then(|| {
        let d = spec.feature_dim;
        Tensor::from_fn(&[n, d], |i| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let (row, col) = (i / d, i % d);
            noise + if row % d == col { 1.0 } else { 0.0 }
        })
    });

    let entities = Vocab::from_names((0..n).map(|i| format!("e{i}")));
    let relations = Vocab::from_names(spec.rules.iter().map(|r| r.relation.clone()));
    KnowledgeGraph::new(entities, relations, [triples, dev, test], features)
}
