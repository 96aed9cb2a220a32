//! Structure-aware query encoder.
//!
//! A `(head, relation)` query is turned into a mask representation by a
//! small fusion MLP over the head's embedding (plus projected features) and
//! the relation embedding. Relation-aware graph attention then reasons over
//! the head's local subgraph, the two views are mixed through a learned
//! convex gate, and a tied output layer scores every candidate tail.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, Owner, ParamId, ParameterStore, Tensor, TensorError, Var};
use crate::kg::{extract_subgraph, KgError, KnowledgeGraph, Subgraph, SubgraphOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub mgat_layers: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub hops: usize,
    pub relation_filter: bool,
    pub node_cap: usize,
    pub exclude_query_edges: bool,
    /// Skip graph attention entirely; the fused output is the mask vector.
    pub no_mgat: bool,
    /// One gate per dimension instead of a single scalar.
    pub per_dim_lambda: bool,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            mgat_layers: 3,
            heads: 4,
            leaky_slope: 0.2,
            hops: 1,
            relation_filter: false,
            node_cap: 64,
            exclude_query_edges: true,
            no_mgat: false,
            per_dim_lambda: false,
            init_std: 0.3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("invalid encoder config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
struct MgatLayer {
    node: ParamId,
    relation: ParamId,
    attention: Vec<ParamId>,
    out: Linear,
}

/// Intermediate values of one query's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Mask representation `[1, d]`.
    pub h_mask: Var,
    /// Head-node state after graph attention `[1, d]`; absent with `no_mgat`.
    pub z_mask: Option<Var>,
    /// Gated mix of the two, also the condition for the denoiser `[1, d]`.
    pub fused: Var,
    /// Candidate-tail scores `[1, N]`.
    pub scores: Var,
}

/// Attention weights of one MGAT pass: `weights[layer][head][edge]`, with
/// the edge list (self-loops included) shared by all layers.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Parameters and hyperparameters of the encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParameterStore,
    n_entities: usize,
    n_relations: usize,
    feature_dim: usize,
    entity: ParamId,
    relation: ParamId,
    relation_inverse: ParamId,
    self_loop: ParamId,
    feature_proj: Option<Linear>,
    fuse_in: Linear,
    fuse_out: Linear,
    layers: Vec<MgatLayer>,
    lambda_raw: ParamId,
    lm_bias: ParamId,
}

impl Encoder {
    pub fn new(
        config: EncoderConfig,
        n_entities: usize,
        n_relations: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        if config.dim == 0 || config.heads == 0 || (!config.no_mgat && config.mgat_layers == 0) {
            return Err(EncoderError::Config(
                "dim, heads and mgat_layers must be positive".into(),
            ));
        }
        if !(1..=2).contains(&config.hops) {
            return Err(EncoderError::Config(format!("hops must be 1 or 2, got {}", config.hops)));
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(Owner::Encoder);
        let std = config.init_std;
        let entity = store.add_normal("entity", &[n_entities, d], std, &mut rng);
        let relation = store.add_normal("relation", &[n_relations, d], std, &mut rng);
        let relation_inverse = store.add_normal("relation_inverse", &[n_relations, d], std, &mut rng);
        let self_loop = store.add_normal("self_loop", &[1, d], std, &mut rng);
        let feature_proj =
            (feature_dim > 0).then(|| Linear::new(&mut store, "feature_proj", feature_dim, d, false, &mut rng));
        let fuse_in = Linear::new(&mut store, "fuse_in", 2 * d, d, true, &mut rng);
        let fuse_out = Linear::new(&mut store, "fuse_out", d, d, true, &mut rng);
        let mut layers = Vec::new();
        if !config.no_mgat {
            for l in 0..config.mgat_layers {
                let scale = 1.0 / (d as f64).sqrt();
                let node = store.add_normal(&format!("mgat.{l}.node"), &[d, d], scale, &mut rng);
                let relation = store.add_normal(&format!("mgat.{l}.relation"), &[d, d], scale, &mut rng);
                let attention = (0..config.heads)
                    .map(|k| store.add_normal(&format!("mgat.{l}.attn.{k}"), &[3 * d, 1], scale, &mut rng))
                    .collect();
                let out = Linear::new(&mut store, &format!("mgat.{l}.out"), config.heads * d, d, true, &mut rng);
                layers.push(MgatLayer {
                    node,
                    relation,
                    attention,
                    out,
                });
            }
        }
        let lambda_shape = if config.per_dim_lambda { vec![1, d] } else { vec![1] };
        let lambda_raw = store.add_zeros("lambda_raw", &lambda_shape);
        let lm_bias = store.add_zeros("lm_bias", &[1, n_entities]);
        Ok(Self {
            config,
            store,
            n_entities,
            n_relations,
            feature_dim,
            entity,
            relation,
            relation_inverse,
            self_loop,
            feature_proj,
            fuse_in,
            fuse_out,
            layers,
            lambda_raw,
            lm_bias,
        })
    }

    /// Sized to the given graph.
    pub fn for_graph(config: EncoderConfig, kg: &KnowledgeGraph, seed: u64) -> Result<Self, EncoderError> {
        Self::new(config, kg.num_entities(), kg.num_relations(), kg.feature_dim(), seed)
    }

    pub fn config(&self) -> &EncoderConfig {
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

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn entity_table(&self) -> ParamId {
        self.entity
    }

    pub fn relation_table(&self) -> ParamId {
        self.relation
    }

    /// The output layer's weight. Tied: this is the entity table itself.
    pub fn lm_head_weight(&self) -> ParamId {
        self.entity
    }

    pub fn lm_bias(&self) -> ParamId {
        self.lm_bias
    }

    pub fn lambda_raw(&self) -> ParamId {
        self.lambda_raw
    }

    pub fn subgraph_options(&self) -> SubgraphOptions {
        SubgraphOptions {
            hops: self.config.hops,
            relation_filter: self.config.relation_filter,
            node_cap: self.config.node_cap,
            exclude_query_edges: self.config.exclude_query_edges,
            seed: 0,
        }
    }

    pub fn subgraph(&self, kg: &KnowledgeGraph, head: usize, relation: usize) -> Result<Subgraph, KgError> {
        extract_subgraph(kg, head, relation, &self.subgraph_options())
    }

    /// Entity embedding plus projected features for each listed entity.
    fn node_inputs(&self, g: &mut Graph, kg: &KnowledgeGraph, ids: &[usize]) -> Result<Var, TensorError> {
        let table = g.param(&self.store, self.entity)?;
        let emb = g.gather_rows(table, ids)?;
        match (&self.feature_proj, kg.features()) {
            (Some(proj), Some(feats)) => {
                let rows: Vec<f64> = ids.iter().flat_map(|&i| feats.row_slice(i).to_vec()).collect();
                let f = g.constant(Tensor::new(vec![ids.len(), feats.cols()], rows)?)?;
                let pf = proj.forward(g, &self.store, f)?;
                g.add(emb, pf)
            }
            _ => Ok(emb),
        }
    }

    /// Mask representation for `(head, relation)`.
    pub fn encode_query(&self, g: &mut Graph, kg: &KnowledgeGraph, head: usize, relation: usize) -> Result<Var, TensorError> {
        let h = self.node_inputs(g, kg, &[head])?;
        let rel_table = g.param(&self.store, self.relation)?;
        let r = g.gather_rows(rel_table, &[relation])?;
        let x = g.concat(&[h, r])?;
        let x = self.fuse_in.forward(g, &self.store, x)?;
        let x = g.gelu(x)?;
        self.fuse_out.forward(g, &self.store, x)
    }

    /// Message-passing edges: each triple in both directions plus one
    /// self-loop per node. Relation codes index `[forward | inverse | self]`.
    fn mgat_edges(&self, sub: &Subgraph) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let r = self.n_relations;
        let m = 2 * sub.edges.len() + sub.len();
        let (mut src, mut dst, mut code) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
        for &(u, rel, v) in &sub.edges {
            src.push(u);
            dst.push(v);
            code.push(rel);
            src.push(v);
            dst.push(u);
            code.push(r + rel);
        }
        for v in 0..sub.len() {
            src.push(v);
            dst.push(v);
            code.push(2 * r);
        }
        (src, dst, code)
    }

    /// Graph attention over `sub`, starting from `h_mask` at the head node.
    /// Returns the head-node state after the last layer.
    pub fn mgat_forward(
        &self,
        g: &mut Graph,
        kg: &KnowledgeGraph,
        h_mask: Var,
        sub: &Subgraph,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var, TensorError> {
        let n = sub.len();
        let mut x = if n > 1 {
            let others = self.node_inputs(g, kg, &sub.nodes[1..])?;
            g.concat_rows(&[h_mask, others])?
        } else {
            h_mask
        };
        let (src, dst, code) = self.mgat_edges(sub);
        let fwd = g.param(&self.store, self.relation)?;
        let inv = g.param(&self.store, self.relation_inverse)?;
        let slf = g.param(&self.store, self.self_loop)?;
        let rel_all = g.concat_rows(&[fwd, inv, slf])?;
        if let Some(t) = trace.as_deref_mut() {
            t.src = src.clone();
            t.dst = dst.clone();
            t.weights.clear();
        }

        for layer in &self.layers {
            let w = g.param(&self.store, layer.node)?;
            let wr = g.param(&self.store, layer.relation)?;
            let wx = g.matmul(x, w)?;
            let rel = g.matmul(rel_all, wr)?;
            let rel_e = g.gather_rows(rel, &code)?;
            let wx_src = g.gather_rows(wx, &src)?;
            let wx_dst = g.gather_rows(wx, &dst)?;
            let features = g.concat(&[wx_src, wx_dst, rel_e])?;
            let message = g.add(wx_src, rel_e)?;

            let mut heads = Vec::with_capacity(layer.attention.len());
            let mut layer_weights = Vec::new();
            for &a in &layer.attention {
                let a = g.param(&self.store, a)?;
                let logits = g.matmul(features, a)?;
                let logits = g.leaky_relu(logits, self.config.leaky_slope)?;
                let att = g.segment_softmax(logits, &dst)?;
                if trace.is_some() {
                    layer_weights.push(g.value(att).data().to_vec());
                }
                let weighted = g.mul(message, att)?;
                heads.push(g.scatter_add_rows(weighted, &dst, n)?);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.weights.push(layer_weights);
            }
            let cat = g.concat(&heads)?;
            let act = g.gelu(cat)?;
            x = layer.out.forward(g, &self.store, act)?;
        }
        g.gather_rows(x, &[0])
    }

    /// `λ·h_mask + (1-λ)·z_mask` with `λ = sigmoid(λ_raw)`.
    pub fn adaptive_fuse(&self, g: &mut Graph, h_mask: Var, z_mask: Var) -> Result<Var, TensorError> {
        let raw = g.param(&self.store, self.lambda_raw)?;
        fuse_with(g, h_mask, z_mask, raw)
    }

    /// Scores against every entity through the tied output layer.
    pub fn lm_head(&self, g: &mut Graph, fused: Var) -> Result<Var, TensorError> {
        let table = g.param(&self.store, self.entity)?;
        let t = g.transpose(table)?;
        let scores = g.matmul(fused, t)?;
        let bias = g.param(&self.store, self.lm_bias)?;
        g.add(scores, bias)
    }

    /// The condition handed to the denoiser: the fused representation.
    pub fn condition_of(&self, fused: Var) -> Var {
        fused
    }

    /// Full forward pass for one query over a prepared subgraph.
    pub fn forward(
        &self,
        g: &mut Graph,
        kg: &KnowledgeGraph,
        sub: &Subgraph,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<EncoderOutput, TensorError> {
        let (head, relation) = sub.query;
        let h_mask = self.encode_query(g, kg, head, relation)?;
        let (z_mask, fused) = if self.config.no_mgat {
            (None, h_mask)
        } else {
            let z = self.mgat_forward(g, kg, h_mask, sub, trace)?;
            (Some(z), self.adaptive_fuse(g, h_mask, z)?)
        };
        let scores = self.lm_head(g, fused)?;
        Ok(EncoderOutput {
            h_mask,
            z_mask,
            fused,
            scores,
        })
    }

    /// Pure evaluation for one query: `(scores, condition)`.
    pub fn infer(&self, kg: &KnowledgeGraph, head: usize, relation: usize) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
        let sub = self.subgraph(kg, head, relation)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, kg, &sub, None)?;
        let cond = self.condition_of(out.fused);
        Ok((g.value(out.scores).data().to_vec(), g.value(cond).data().to_vec()))
    }
}

/// Convex mix `raw ↦ σ(raw)`, written as `z + σ(raw)·(h − z)`.
pub fn fuse_with(g: &mut Graph, h: Var, z: Var, raw: Var) -> Result<Var, TensorError> {
    let lambda = g.sigmoid(raw)?;
    let diff = g.sub(h, z)?;
    let scaled = g.mul(diff, lambda)?;
    g.add(z, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{generate_synthetic, Rule, SyntheticSpec};

    fn toy() -> KnowledgeGraph {
        generate_synthetic(&SyntheticSpec {
            n_entities: 12,
            rules: vec![Rule::shift("a", 1), Rule::shift("b", 3), Rule::pairing("c", 5)],
            feature_dim: 4,
            seed: 9,
        })
        .unwrap()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            heads: 2,
            mgat_layers: 2,
            ..Default::default()
        }
    }

    fn zero_all(enc: &mut Encoder) {
        for p in enc.store_mut().params_mut() {
            p.value.fill(0.0);
        }
    }

    #[test]
    fn zero_everything_gives_zero_mask() {
        let kg = toy();
        let mut enc = Encoder::for_graph(small_config(), &kg, 1).unwrap();
        zero_all(&mut enc);
        let mut g = Graph::new();
        let h = enc.encode_query(&mut g, &kg, 0, 0).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_query_is_deterministic() {
        let kg = toy();
        let enc = Encoder::for_graph(small_config(), &kg, 1).unwrap();
        let run = || {
            let mut g = Graph::new();
            let h = enc.encode_query(&mut g, &kg, 3, 1).unwrap();
            g.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn relation_changes_mask_for_identical_heads() {
        let kg = toy();
        let mut enc = Encoder::for_graph(small_config(), &kg, 1).unwrap();
        let (e, f) = (enc.entity_table(), enc.feature_proj.unwrap().weight);
        // make entities 0 and 1 indistinguishable
        let row0 = enc.store().value(e).row_slice(0).to_vec();
        enc.store_mut().value_mut(e).data_mut()[8..16].copy_from_slice(&row0);
        enc.store_mut().value_mut(f).fill(0.0);
        let mask = |h: usize, r: usize| {
            let mut g = Graph::new();
            let v = enc.encode_query(&mut g, &kg, h, r).unwrap();
            g.value(v).clone()
        };
        assert_eq!(mask(0, 0), mask(1, 0));
        assert_ne!(mask(0, 0), mask(1, 1));
    }

    #[test]
    fn single_node_subgraph_attends_to_itself() {
        let kg = toy();
        let enc = Encoder::for_graph(small_config(), &kg, 2).unwrap();
        let sub = Subgraph {
            nodes: vec![4],
            edges: vec![],
            query: (4, 0),
        };
        let mut g = Graph::new();
        let mut trace = AttentionTrace::default();
        enc.forward(&mut g, &kg, &sub, Some(&mut trace)).unwrap();
        for layer in &trace.weights {
            for head in layer {
                assert_eq!(head, &vec![1.0]);
            }
        }
    }

    #[test]
    fn incoming_attention_sums_to_one() {
        let kg = toy();
        let config = EncoderConfig { hops: 2, ..small_config() };
        let enc = Encoder::for_graph(config, &kg, 3).unwrap();
        for h in 0..kg.num_entities() {
            let sub = enc.subgraph(&kg, h, 2).unwrap();
            let mut g = Graph::new();
            let mut trace = AttentionTrace::default();
            enc.forward(&mut g, &kg, &sub, Some(&mut trace)).unwrap();
            for layer in &trace.weights {
                for head in layer {
                    let mut totals = vec![0.0; sub.len()];
                    for (w, &d) in head.iter().zip(&trace.dst) {
                        assert!(*w > 0.0 && *w <= 1.0);
                        totals[d] += w;
                    }
                    assert!(totals.iter().all(|t| (t - 1.0).abs() < 1e-9));
                }
            }
        }
    }

    #[test]
    fn node_order_does_not_change_head_state() {
        let kg = toy();
        let config = EncoderConfig { hops: 2, ..small_config() };
        let enc = Encoder::for_graph(config, &kg, 4).unwrap();
        let sub = enc.subgraph(&kg, 2, 0).unwrap();
        assert!(sub.len() > 3);
        // reverse all non-head nodes
        let n = sub.len();
        let perm: Vec<usize> = std::iter::once(0).chain((1..n).rev()).collect();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let shuffled = Subgraph {
            nodes: perm.iter().map(|&i| sub.nodes[i]).collect(),
            edges: sub.edges.iter().rev().map(|&(u, r, v)| (inv[u], r, inv[v])).collect(),
            query: sub.query,
        };
        let z = |s: &Subgraph| {
            let mut g = Graph::new();
            let out = enc.forward(&mut g, &kg, s, None).unwrap();
            g.value(out.z_mask.unwrap()).clone()
        };
        let (a, b) = (z(&sub), z(&shuffled));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::row(vec![2.0, 0.0])).unwrap();
        let z = g.constant(Tensor::row(vec![0.0, 2.0])).unwrap();
        for (raw, expect) in [(30.0, [2.0, 0.0]), (-30.0, [0.0, 2.0]), (0.0, [1.0, 1.0])] {
            let r = g.constant(Tensor::scalar(raw)).unwrap();
            let f = fuse_with(&mut g, h, z, r).unwrap();
            for (x, y) in g.value(f).data().iter().zip(expect) {
                assert!((x - y).abs() < 1e-12, "{raw}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn lm_head_is_tied_and_sized() {
        let kg = toy();
        let mut enc = Encoder::for_graph(small_config(), &kg, 5).unwrap();
        assert_eq!(enc.lm_head_weight(), enc.entity_table());
        let mut g = Graph::new();
        let zero = g.constant(Tensor::row(vec![0.0; 8])).unwrap();
        let s = enc.lm_head(&mut g, zero).unwrap();
        assert_eq!(g.value(s).shape(), &[1, 12]);
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));

        // orthogonal rows: the fused vector equal to row t scores t highest
        let e = enc.entity_table();
        let table = enc.store_mut().value_mut(e);
        table.fill(0.0);
        for t in 0..8 {
            table.data_mut()[t * 8 + t] = 1.0;
        }
        let mut g = Graph::new();
        let q = g.constant(Tensor::row((0..8).map(|i| if i == 5 { 1.0 } else { 0.0 }).collect())).unwrap();
        let s = enc.lm_head(&mut g, q).unwrap();
        let v = g.value(s).data();
        let best = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(best, 5);
    }

    #[test]
    fn no_mgat_fuses_to_mask() {
        let kg = toy();
        let config = EncoderConfig { no_mgat: true, ..small_config() };
        let enc = Encoder::for_graph(config, &kg, 6).unwrap();
        let sub = enc.subgraph(&kg, 1, 1).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &kg, &sub, None).unwrap();
        assert!(out.z_mask.is_none());
        assert_eq!(g.value(out.fused), g.value(out.h_mask));
        assert!(enc.store().id("mgat.0.node").is_none());
    }

    #[test]
    fn condition_is_the_fused_vector() {
        let kg = toy();
        let enc = Encoder::for_graph(small_config(), &kg, 7).unwrap();
        let sub = enc.subgraph(&kg, 0, 2).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &kg, &sub, None).unwrap();
        let c = enc.condition_of(out.fused);
        assert_eq!(g.value(c), g.value(out.fused));
        assert_eq!(g.value(c).len(), 8);
    }
}
