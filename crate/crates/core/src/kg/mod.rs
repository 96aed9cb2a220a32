//! Knowledge-graph data model, file ingestion and filtered candidates.

mod subgraph;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use subgraph::{extract_subgraph, Subgraph, SubgraphOptions};
pub use synthetic::{default_synthetic_spec, generate_synthetic, rule_tables, Rule, RuleKind, SyntheticSpec};

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("feature file {path}: {reason}")]
    BadFeatures { path: String, reason: String },
    #[error("invalid synthetic rule: {0}")]
    BadRule(String),
    #[error("{what} index {index} out of range (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// String id to dense index, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::default();
        for n in names {
            v.intern(&n);
        }
        v
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Entity and relation vocabularies, split triples, optional per-entity
/// features, plus lookup indices built once at construction.
///
/// Immutable after construction; every query method takes `&self`.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    splits: [Vec<Triple>; 3],
    features: Option<Tensor>,
    warnings: Vec<String>,
    /// Every tail known for a (head, relation) pair in any split.
    known_tails: HashMap<(usize, usize), Vec<usize>>,
    /// Train-split tails for a (head, relation) pair.
    train_tails: HashMap<(usize, usize), Vec<usize>>,
    /// Train triple indices touching each entity, either end.
    train_incident: Vec<Vec<usize>>,
    /// `cooccur[r * R + r2]`: some head carries both relations in train.
    cooccur: Vec<bool>,
}

/// Counts reported after loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entities={} relations={} train={} dev={} test={}",
            self.entities, self.relations, self.train, self.dev, self.test
        )
    }
}

impl KnowledgeGraph {
    /// Builds a graph, dropping duplicate triples within each split.
    pub fn new(
        entities: Vocab,
        relations: Vocab,
        splits: [Vec<Triple>; 3],
        features: Option<Tensor>,
    ) -> Result<Self, KgError> {
        let (n, r) = (entities.len(), relations.len());
        let mut deduped: [Vec<Triple>; 3] = Default::default();
        for (dst, src) in deduped.iter_mut().zip(splits) {
            let mut seen = HashSet::new();
            for t in src {
                for (what, index, size) in [("entity", t.head, n), ("relation", t.relation, r), ("entity", t.tail, n)] {
                    if index >= size {
                        return Err(KgError::OutOfRange { what, index, size });
                    }
                }
                if seen.insert(t) {
                    dst.push(t);
                }
            }
        }
        if let Some(f) = &features {
            if f.rows() != n || !f.is_finite() {
                return Err(KgError::BadFeatures {
                    path: "<memory>".into(),
                    reason: format!("expected {n} finite rows, got shape {:?}", f.shape()),
                });
            }
        }
        let mut g = Self {
            entities,
            relations,
            splits: deduped,
            features,
            warnings: Vec::new(),
            known_tails: HashMap::new(),
            train_tails: HashMap::new(),
            train_incident: vec![Vec::new(); n],
            cooccur: vec![false; r * r],
        };
        g.build_indices();
        Ok(g)
    }

    fn build_indices(&mut self) {
        for split in Split::ALL {
            for t in &self.splits[split as usize] {
                self.known_tails.entry((t.head, t.relation)).or_default().push(t.tail);
            }
        }
        let r = self.relations.len();
        let mut head_rels: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, t) in self.splits[Split::Train as usize].iter().enumerate() {
            self.train_tails.entry((t.head, t.relation)).or_default().push(t.tail);
            self.train_incident[t.head].push(i);
            if t.tail != t.head {
                self.train_incident[t.tail].push(i);
            }
            head_rels.entry(t.head).or_default().push(t.relation);
        }
        let mut heads: Vec<_> = head_rels.into_values().collect();
        heads.sort();
        for rels in heads {
            for &a in &rels {
                for &b in &rels {
                    self.cooccur[a * r + b] = true;
                }
            }
        }
    }

    /// Reads the three split files (and optionally a feature file).
    ///
    /// Vocabularies cover the union of splits. Dev/test triples that mention
    /// an entity or relation never seen in train are excluded and reported
    /// through [`KnowledgeGraph::warnings`].
    pub fn load(
        train: &Path,
        dev: &Path,
        test: &Path,
        features: Option<&Path>,
    ) -> Result<Self, KgError> {
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let mut raw: [Vec<Triple>; 3] = Default::default();
        for (slot, path) in raw.iter_mut().zip([train, dev, test]) {
            *slot = read_triples(path, &mut entities, &mut relations)?;
        }

        let mut seen_e = vec![false; entities.len()];
        let mut seen_r = vec![false; relations.len()];
        for t in &raw[0] {
            seen_e[t.head] = true;
            seen_e[t.tail] = true;
            seen_r[t.relation] = true;
        }
        let mut warnings = Vec::new();
        for (split, triples) in [Split::Dev, Split::Test].into_iter().zip(raw[1..].iter_mut()) {
            triples.retain(|t| {
                let ok = seen_e[t.head] && seen_e[t.tail] && seen_r[t.relation];
                if !ok {
                    warnings.push(format!(
                        "{split}: excluding ({}, {}, {}) with an element unseen in train",
                        entities.name(t.head),
                        relations.name(t.relation),
                        entities.name(t.tail)
                    ));
                }
                ok
            });
        }
        if raw.iter().all(Vec::is_empty) {
            warnings.push("graph is empty".to_string());
        }

        let feats = features
            .map(|p| read_features(p, &entities))
            .transpose()?;
        let mut g = Self::new(entities, relations, raw, feats)?;
        for w in &warnings {
            log::warn!("{w}");
        }
        g.warnings = warnings;
        Ok(g)
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        &self.splits[split as usize]
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, Tensor::cols)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn stats(&self) -> Stats {
        Stats {
            entities: self.num_entities(),
            relations: self.num_relations(),
            train: self.split(Split::Train).len(),
            dev: self.split(Split::Dev).len(),
            test: self.split(Split::Test).len(),
        }
    }

    /// Tails known for `(head, relation)` in the training split.
    pub fn train_tails(&self, head: usize, relation: usize) -> &[usize] {
        self.train_tails
            .get(&(head, relation))
            .map_or(&[], Vec::as_slice)
    }

    /// Tails known for `(head, relation)` in any split.
    pub fn known_tails(&self, head: usize, relation: usize) -> &[usize] {
        self.known_tails
            .get(&(head, relation))
            .map_or(&[], Vec::as_slice)
    }

    /// Distinct (head, relation) pairs of a split, in first-seen order.
    pub fn queries(&self, split: Split) -> Vec<(usize, usize)> {
        let mut seen = HashSet::new();
        self.split(split)
            .iter()
            .filter(|t| seen.insert((t.head, t.relation)))
            .map(|t| (t.head, t.relation))
            .collect()
    }

    pub(crate) fn train_incident(&self, entity: usize) -> &[usize] {
        &self.train_incident[entity]
    }

    /// Whether some training head carries both relations.
    pub fn relations_cooccur(&self, a: usize, b: usize) -> bool {
        self.cooccur[a * self.num_relations() + b]
    }

    pub fn check_entity(&self, e: usize) -> Result<(), KgError> {
        if e < self.num_entities() {
            Ok(())
        } else {
            Err(KgError::OutOfRange {
                what: "entity",
                index: e,
                size: self.num_entities(),
            })
        }
    }

    pub fn check_relation(&self, r: usize) -> Result<(), KgError> {
        if r < self.num_relations() {
            Ok(())
        } else {
            Err(KgError::OutOfRange {
                what: "relation",
                index: r,
                size: self.num_relations(),
            })
        }
    }

    /// Candidate mask for ranking `gold` as the tail of `(head, relation)`:
    /// every other tail known in any split is removed, gold is always kept.
    pub fn filtered_candidates(&self, head: usize, relation: usize, gold: usize) -> Vec<bool> {
        let mut mask = vec![true; self.num_entities()];
        for &t in self.known_tails(head, relation) {
            if t != gold {
                mask[t] = false;
            }
        }
        mask
    }

    pub fn write_triples(&self, split: Split, path: &Path) -> Result<(), KgError> {
        let io = |source| KgError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        for t in self.split(split) {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entities.name(t.head),
                self.relations.name(t.relation),
                self.entities.name(t.tail)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Writes the feature matrix; a no-op returning `false` when absent.
    pub fn write_features(&self, path: &Path) -> Result<bool, KgError> {
        let Some(f) = &self.features else {
            return Ok(false);
        };
        let io = |source| KgError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        writeln!(w, "{} {}", f.rows(), f.cols()).map_err(io)?;
        for (i, name) in self.entities.names().iter().enumerate() {
            write!(w, "{name}").map_err(io)?;
            for v in f.row_slice(i) {
                // `{:?}` round-trips f64 exactly
                write!(w, " {v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(true)
    }
}

fn read_triples(path: &Path, entities: &mut Vocab, relations: &mut Vocab) -> Result<Vec<Triple>, KgError> {
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(KgError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("expected head<TAB>relation<TAB>tail, got {} field(s)", fields.len()),
            });
        }
        let h = entities.intern(fields[0].trim());
        let r = relations.intern(fields[1].trim());
        let t = entities.intern(fields[2].trim());
        out.push(Triple::new(h, r, t));
    }
    Ok(out)
}

fn read_features(path: &Path, entities: &Vocab) -> Result<Tensor, KgError> {
    let p = path.display().to_string();
    let bad = |reason: String| KgError::BadFeatures {
        path: p.clone(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: p.clone(),
        source,
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(format!("header: {e}")))?;
    let [n, d] = dims[..] else {
        return Err(bad(format!("header must be `N d_feat`, got {header:?}")));
    };
    if n != entities.len() {
        return Err(bad(format!("{n} rows declared but vocabulary has {}", entities.len())));
    }
    let mut data = vec![0.0; n * d];
    let mut filled = vec![false; n];
    for line in lines {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default();
        let e = entities
            .get(name)
            .ok_or_else(|| bad(format!("unknown entity {name:?}")))?;
        let vals: Vec<f64> = parts
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|err| bad(format!("entity {name}: {err}")))?;
        if vals.len() != d || vals.iter().any(|v: &f64| !v.is_finite()) {
            return Err(bad(format!("entity {name}: expected {d} finite values")));
        }
        data[e * d..(e + 1) * d].copy_from_slice(&vals);
        filled[e] = true;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(bad(format!("no row for entity {:?}", entities.name(missing))));
    }
    Tensor::new(vec![n, d], data).map_err(|e| bad(e.to_string()))
}
