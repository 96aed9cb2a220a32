//! Finite-difference gradient checks shared by the test targets.

use diffcom_core::autodiff::{Graph, Owner, ParamId, ParameterStore, Tensor, Var};
use diffcom_core::denoiser::{Denoiser, DenoiserConfig};
use diffcom_core::encoder::{Encoder, EncoderConfig};
use diffcom_core::kg::{generate_synthetic, Rule, SyntheticSpec};
use diffcom_core::train::{bce_loss, kl_loss, label_vector, KlKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Compares analytic and numeric gradients of the scalar built by `f` for
/// every parameter entry (or a seeded sample of `limit` entries).
fn check<F>(store: &mut ParameterStore, limit: usize, f: F)
where
    F: Fn(&mut Graph, &ParameterStore) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let eval = |s: &ParameterStore| {
        let mut g = Graph::new();
        let v = f(&mut g, s);
        g.value(v).item()
    };

    let mut entries: Vec<(ParamId, usize)> = store
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    if entries.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(entries.len() as u64);
        for i in 0..limit {
            let j = rng.gen_range(i..entries.len());
            entries.swap(i, j);
        }
        entries.truncate(limit);
    }
    for (id, i) in entries {
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + H;
        let up = eval(store);
        store.value_mut(id).data_mut()[i] = orig - H;
        let down = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel < TOL,
            "{}[{i}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}",
            store.get(id).name
        );
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Weighted sum with fixed random weights, so every output entry carries a
/// distinct upstream gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape, 1.0)).unwrap();
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

struct Fixture {
    store: ParameterStore,
    a: ParamId,
    b: ParamId,
}

fn fixture(seed: u64, a_shape: &[usize], b_shape: &[usize]) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new(Owner::Encoder);
    let a = store.add("a", rand_tensor(&mut rng, a_shape, 1.0));
    let b = store.add("b", rand_tensor(&mut rng, b_shape, 1.0));
    Fixture { store, a, b }
}

fn unary(seed: u64, shape: &[usize], op: impl Fn(&mut Graph, Var) -> Var) {
    let mut fx = fixture(seed, shape, &[1]);
    let a = fx.a;
    check(&mut fx.store, usize::MAX, |g, s| {
        let x = g.param(s, a).unwrap();
        let y = op(g, x);
        project(g, y, seed)
    });
}

fn binary(seed: u64, a_shape: &[usize], b_shape: &[usize], op: impl Fn(&mut Graph, Var, Var) -> Var) {
    let mut fx = fixture(seed, a_shape, b_shape);
    let (a, b) = (fx.a, fx.b);
    check(&mut fx.store, usize::MAX, |g, s| {
        let x = g.param(s, a).unwrap();
        let y = g.param(s, b).unwrap();
        let z = op(g, x, y);
        project(g, z, seed)
    });
}

pub fn matmul_and_transpose() {
    binary(1, &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b).unwrap());
    unary(2, &[3, 5], |g, a| g.transpose(a).unwrap());
}

pub fn elementwise_with_every_broadcast() {
    for (i, b_shape) in [vec![3, 4], vec![1], vec![1, 4], vec![4], vec![3, 1]].into_iter().enumerate() {
        let s = 10 + i as u64;
        binary(s, &[3, 4], &b_shape, |g, a, b| g.add(a, b).unwrap());
        binary(s, &[3, 4], &b_shape, |g, a, b| g.sub(a, b).unwrap());
        binary(s, &[3, 4], &b_shape, |g, a, b| g.mul(a, b).unwrap());
    }
    unary(20, &[2, 3], |g, a| g.scale(a, -1.7).unwrap());
}

pub fn shape_ops() {
    unary(30, &[2, 6], |g, a| g.reshape(a, &[3, 4]).unwrap());
    // repeated indices accumulate
    unary(31, &[4, 3], |g, a| g.gather_rows(a, &[2, 0, 2, 3]).unwrap());
    unary(32, &[5, 2], |g, a| g.scatter_add_rows(a, &[1, 0, 1, 3, 1], 4).unwrap());
    binary(33, &[2, 3], &[2, 2], |g, a, b| g.concat(&[a, b, a]).unwrap());
    binary(34, &[2, 3], &[1, 3], |g, a, b| g.concat_rows(&[a, b]).unwrap());
}

pub fn normalizations() {
    unary(40, &[3, 5], |g, a| g.layer_norm(a, 1e-5).unwrap());
    unary(41, &[3, 5], |g, a| g.softmax(a).unwrap());
    unary(42, &[3, 5], |g, a| g.log_softmax(a).unwrap());
    unary(43, &[7, 1], |g, a| g.segment_softmax(a, &[0, 2, 0, 1, 2, 2, 0]).unwrap());
}

pub fn activations() {
    unary(50, &[4, 3], |g, a| g.sigmoid(a).unwrap());
    unary(51, &[4, 3], |g, a| g.gelu(a).unwrap());
    // entries are drawn away from the kink by the fixture's range check below
    let mut fx = fixture(52, &[4, 3], &[1]);
    for v in fx.store.value_mut(fx.a).data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let a = fx.a;
    check(&mut fx.store, usize::MAX, |g, s| {
        let x = g.param(s, a).unwrap();
        let y = g.leaky_relu(x, 0.2).unwrap();
        project(g, y, 52)
    });
}

pub fn reductions_and_losses() {
    unary(60, &[3, 4], |g, a| g.sum(a).unwrap());
    unary(61, &[3, 4], |g, a| g.mean(a).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let y = Tensor::from_fn(&[2, 5], |_| f64::from(rng.gen_bool(0.3)));
    let mut fx = fixture(62, &[2, 5], &[1]);
    let a = fx.a;
    check(&mut fx.store, usize::MAX, |g, s| {
        let x = g.param(s, a).unwrap();
        bce_loss(g, x, &y).unwrap()
    });
    let target = rand_tensor(&mut rng, &[2, 5], 3.0);
    for kind in [KlKind::Softmax, KlKind::Bernoulli] {
        check(&mut fx.store, usize::MAX, |g, s| {
            let x = g.param(s, a).unwrap();
            kl_loss(g, &target, x, kind).unwrap()
        });
    }
}

fn toy_graph() -> diffcom_core::KnowledgeGraph {
    generate_synthetic(&SyntheticSpec {
        n_entities: 12,
        rules: vec![Rule::pairing("mirror", 0), Rule::shift("next", 1), Rule::composition("far", "next", "mirror")],
        feature_dim: 3,
        seed: 5,
    })
    .unwrap()
}

pub fn encoder_loss_gradients() {
    let kg = toy_graph();
    for hops in [1, 2] {
        let cfg = EncoderConfig {
            dim: 6,
            mgat_layers: 2,
            heads: 2,
            hops,
            ..Default::default()
        };
        let mut enc = Encoder::for_graph(cfg, &kg, 3).unwrap();
        let sub = enc.subgraph(&kg, 4, 2).unwrap();
        assert!(sub.len() > 2);
        let y = label_vector(kg.num_entities(), kg.train_tails(4, 2), 0.0);
        let proto = enc.clone();
        let store = enc.store_mut();
        check(store, 400, |g, s| {
            let mut e = proto.clone();
            *e.store_mut() = s.clone();
            let out = e.forward(g, &kg, &sub, None).unwrap();
            bce_loss(g, out.scores, &y).unwrap()
        });
    }
}

pub fn denoiser_loss_gradients() {
    let n = 7;
    let cfg = DenoiserConfig {
        hidden: 6,
        mlp: 8,
        blocks: 2,
        ..Default::default()
    };
    let mut den = Denoiser::new(cfg, n, 4, 5, 9).unwrap();
    // open the zero-initialized regressors so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ids: Vec<ParamId> = den.store().ids().collect();
    for id in ids {
        for v in den.store_mut().value_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let x = rand_tensor(&mut rng, &[2, n], 2.0);
    let c = rand_tensor(&mut rng, &[2, 4], 1.0);
    let target = rand_tensor(&mut rng, &[2, n], 3.0);
    let proto = den.clone();
    check(den.store_mut(), 400, |g, s| {
        let mut d = proto.clone();
        *d.store_mut() = s.clone();
        let xv = g.constant(x.clone()).unwrap();
        let cv = g.constant(c.clone()).unwrap();
        let eps = d.denoise(g, xv, &[1, 5], cv, None).unwrap();
        kl_loss(g, &target, eps, KlKind::Softmax).unwrap()
    });
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Gelu,
    Sigmoid,
    LayerNorm,
    Softmax,
}

/// A random dense network of `depth` layers; `acts` picks each layer's
/// nonlinearity.
pub fn random_network(seed: u64, depth: usize, acts: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new(Owner::Denoiser);
    let mut widths = vec![rng.gen_range(2..5)];
    let mut layers = Vec::new();
    for l in 0..depth {
        let out = rng.gen_range(2..5);
        let w = store.add(&format!("w{l}"), rand_tensor(&mut rng, &[widths[l], out], 1.0));
        let b = store.add(&format!("b{l}"), rand_tensor(&mut rng, &[out], 0.5));
        let act = [Act::Gelu, Act::Sigmoid, Act::LayerNorm, Act::Softmax][acts[l] % 4];
        layers.push((w, b, act));
        widths.push(out);
    }
    let x = rand_tensor(&mut rng, &[3, widths[0]], 1.0);
    check(&mut store, usize::MAX, |g, s| {
        let mut h = g.constant(x.clone()).unwrap();
        for &(w, b, act) in &layers {
            let wv = g.param(s, w).unwrap();
            let bv = g.param(s, b).unwrap();
            h = g.matmul(h, wv).unwrap();
            h = g.add(h, bv).unwrap();
            h = match act {
                Act::Gelu => g.gelu(h).unwrap(),
                Act::Sigmoid => g.sigmoid(h).unwrap(),
                Act::LayerNorm => g.layer_norm(h, 1e-5).unwrap(),
                Act::Softmax => g.softmax(h).unwrap(),
            };
        }
        project(g, h, seed)
    });
}

/// Every primitive check, in order.
pub const PRIMITIVES: &[(&str, fn())] = &[
    ("matmul_and_transpose", matmul_and_transpose),
    ("elementwise_with_every_broadcast", elementwise_with_every_broadcast),
    ("shape_ops", shape_ops),
    ("normalizations", normalizations),
    ("activations", activations),
    ("reductions_and_losses", reductions_and_losses),
    ("encoder_loss_gradients", encoder_loss_gradients),
    ("denoiser_loss_gradients", denoiser_loss_gradients),
];
