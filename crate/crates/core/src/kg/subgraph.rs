//! Query-local neighborhoods over the training triples.

use std::collections::{HashMap, VecDeque};

use super::{KgError, KnowledgeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubgraphOptions {
    /// Traversal radius, 1 or 2.
    pub hops: usize,
    /// Keep only edges whose relation shares a training head with the query
    /// relation (falls back to all edges if that empties the set).
    pub relation_filter: bool,
    /// Maximum node count, head included.
    pub node_cap: usize,
    /// Drop `(head, relation, *)` edges so a query never sees its own answer.
    pub exclude_query_edges: bool,
    /// Tie-break seed for the node cap.
    pub seed: u64,
}

impl Default for SubgraphOptions {
    fn default() -> Self {
        Self {
            hops: 1,
            relation_filter: false,
            node_cap: 64,
            exclude_query_edges: false,
            seed: 0,
        }
    }
}

/// Nodes (head first) and edges in local indices for one `(head, relation)`
/// query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    /// `(local head, relation, local tail)`.
    pub edges: Vec<(usize, usize, usize)>,
    pub query: (usize, usize),
}

impl Subgraph {
    pub fn head(&self) -> usize {
        self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges as global `(head, relation, tail)` triples.
    pub fn global_edges(&self) -> Vec<(usize, usize, usize)> {
        self.edges
            .iter()
            .map(|&(h, r, t)| (self.nodes[h], r, self.nodes[t]))
            .collect()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collects every training triple reachable within `hops` undirected steps
/// of `head`: an edge is kept when at least one endpoint lies strictly
/// inside the radius.
pub fn extract_subgraph(
    g: &KnowledgeGraph,
    head: usize,
    relation: usize,
    opts: &SubgraphOptions,
) -> Result<Subgraph, KgError> {
    g.check_entity(head)?;
    g.check_relation(relation)?;
    let train = g.split(super::Split::Train);
    let skip = |i: usize| {
        let t = &train[i];
        opts.exclude_query_edges && t.head == head && t.relation == relation
    };

    let mut dist: HashMap<usize, usize> = HashMap::from([(head, 0)]);
    let mut queue = VecDeque::from([head]);
    let mut edge_ids = Vec::new();
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if du >= opts.hops {
            continue;
        }
        for &i in g.train_incident(u) {
            if skip(i) {
                continue;
            }
            let t = &train[i];
            let v = if t.head == u { t.tail } else { t.head };
            dist.entry(v).or_insert_with(|| {
                queue.push_back(v);
                du + 1
            });
            edge_ids.push(i);
        }
    }
    edge_ids.sort_unstable();
    edge_ids.dedup();

    if opts.relation_filter {
        let kept: Vec<usize> = edge_ids
            .iter()
            .copied()
            .filter(|&i| g.relations_cooccur(relation, train[i].relation))
            .collect();
        if !kept.is_empty() {
            edge_ids = kept;
        }
    }

    // nearest first, seeded ties
    let mut nodes: Vec<usize> = dist.keys().copied().collect();
    nodes.sort_by_key(|&v| (dist[&v], mix(opts.seed ^ mix(v as u64))));
    nodes.truncate(opts.node_cap.max(1));
    let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let edges = edge_ids
        .into_iter()
        .filter_map(|i| {
            let t = &train[i];
            Some((*local.get(&t.head)?, t.relation, *local.get(&t.tail)?))
        })
        .collect();
    Ok(Subgraph {
        nodes,
        edges,
        query: (head, relation),
    })
}
