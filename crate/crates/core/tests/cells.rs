use muse_core::autograd::{gradcheck, Graph, ParamStore, Tensor, Unary};
use muse_core::cells::{argmax, argmin_last, mixed_op, softmax, CellChain, ChainKind, ChainSpec, EdgeId, Topology};
use muse_core::searchspace::{CellInput, OpKind, Operator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PARAM_FREE: [(&str, Unary); 5] = [
    ("Sigmoid", Unary::Sigmoid),
    ("ReLU", Unary::Relu),
    ("Tanh", Unary::Tanh),
    ("GELU", Unary::Gelu),
    ("Softsign", Unary::Softsign),
];

fn negate_pair() -> Vec<Operator> {
    vec![Operator::Skip, Operator::Activation("Negate", Unary::Neg)]
}

fn run_mixed(alpha: &[f64], h: &[f64], ops: &[Operator]) -> Vec<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, h.len()], h.to_vec()).unwrap());
    let a = g.constant(Tensor::vector(alpha));
    let y = mixed_op(&mut g, &store, CellInput::Single(x), a, ops).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn mixed_op_uniform_skip_and_negate_cancel() {
    assert_eq!(run_mixed(&[0.0, 0.0], &[2.0], &negate_pair()), vec![0.0]);
}

#[test]
fn mixed_op_saturated_logits_select_first() {
    let y = run_mixed(&[20.0, -20.0], &[2.0], &negate_pair());
    assert!((y[0] - 2.0).abs() < 1e-8, "{}", y[0]);
}

#[test]
fn mixed_op_logit_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let ops: Vec<Operator> = OpKind::LinearTransform
        .registry()
        .iter()
        .map(|n| Operator::instantiate(OpKind::LinearTransform, n, 3, &mut store, "e", 5).unwrap())
        .collect();
    for _ in 0..20 {
        let alpha = Tensor::vector(&(0..ops.len()).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let w = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = gradcheck::check(&[alpha, x], 1e-6, |g, v| {
            let y = mixed_op(g, &store, CellInput::Single(v[1]), v[0], &ops)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}

fn spec(kind: ChainKind, depth: usize, topology: Topology, width: usize, fusion: &[&str], transform: &[&str]) -> ChainSpec {
    ChainSpec {
        kind,
        depth,
        topology,
        width,
        fusion_ops: fusion.iter().map(|s| s.to_string()).collect(),
        transform_ops: transform.iter().map(|s| s.to_string()).collect(),
    }
}

fn forward_chain(chain: &CellChain, store: &ParamStore, a: &Tensor, b: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let y = chain.forward(&mut g, store, av, bv).unwrap();
    g.value(y).clone()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn randomize_logits(chain: &CellChain, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for e in &chain.edges {
        let n = e.ops.len();
        store.set_value(e.alpha, Tensor::vector(&(0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()));
    }
}

#[test]
fn single_sum_cell_adds_inputs() {
    let mut store = ParamStore::new();
    let chain = CellChain::new(&spec(ChainKind::Linear, 1, Topology::Chain, 2, &["Sum"], &["Skip"]), &mut store, "c", 0).unwrap();
    let a = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![0.5, 4.0]).unwrap();
    assert_eq!(forward_chain(&chain, &store, &a, &b).data(), &[1.5, 2.0]);
}

#[test]
fn all_skip_chain_is_identity_on_fused_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let chain = CellChain::new(&spec(ChainKind::Linear, 4, Topology::Chain, 3, &["Sum"], &["Skip"]), &mut store, "c", 0).unwrap();
    let a = random_tensor(&mut rng, &[2, 3]);
    let b = random_tensor(&mut rng, &[2, 3]);
    let y = forward_chain(&chain, &store, &a, &b);
    let expect: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    assert_eq!(y.data(), expect.as_slice());
}

fn fusion_oracle(name: &str, a: f64, b: f64) -> f64 {
    match name {
        "Sum" => a + b,
        "Max" => a.max(b),
        "Average" => 0.5 * (a + b),
        _ => unreachable!(),
    }
}

#[test]
fn dag_forward_matches_elementwise_oracle() {
    let fusion = ["Sum", "Max", "Average"];
    let transform: Vec<&str> = PARAM_FREE.iter().map(|p| p.0).chain(["Skip"]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let mut store = ParamStore::new();
        let chain = CellChain::new(&spec(ChainKind::Linear, 3, Topology::Dag, 4, &fusion, &transform), &mut store, "c", 0).unwrap();
        randomize_logits(&chain, &mut store, &mut rng);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[3, 4]);
        let y = forward_chain(&chain, &store, &a, &b);

        let w = |id: EdgeId| softmax(store.value(chain.edges[chain.edge_index(id).unwrap()].alpha).data());
        let transform_mix = |id: EdgeId, x: f64| -> f64 {
            let w = w(id);
            let mut s = 0.0;
            for (k, &name) in transform.iter().enumerate() {
                let v = match PARAM_FREE.iter().find(|p| p.0 == name) {
                    Some((_, u)) => u.apply(x),
                    None => x,
                };
                s += w[k] * v;
            }
            s
        };
        let wf = w(EdgeId { from: 0, to: 1 });
        for i in 0..a.len() {
            let h1: f64 = fusion.iter().enumerate().map(|(k, n)| wf[k] * fusion_oracle(n, a.data()[i], b.data()[i])).sum();
            let h2 = transform_mix(EdgeId { from: 1, to: 2 }, h1);
            let h3 = transform_mix(EdgeId { from: 1, to: 3 }, h1) + transform_mix(EdgeId { from: 2, to: 3 }, h2);
            assert!((y.data()[i] - h3).abs() < 1e-12, "{} vs {h3}", y.data()[i]);
        }
    }
}

#[test]
fn dag_without_skip_edges_equals_chain_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [ChainKind::Linear, ChainKind::Sequence] {
        let full = ChainSpec::full(kind, 4, Topology::Dag, 3);
        let mut dag_store = ParamStore::new();
        let mut dag = CellChain::new(&full, &mut dag_store, "c", 9).unwrap();
        let chain_spec = ChainSpec {
            topology: Topology::Chain,
            ..full.clone()
        };
        let mut chain_store = ParamStore::new();
        let chain = CellChain::new(&chain_spec, &mut chain_store, "c", 9).unwrap();
        randomize_logits(&chain, &mut chain_store, &mut rng);
        for e in &chain.edges {
            let id = dag_store.find(&chain_store.get(e.alpha).name).unwrap();
            dag_store.set_value(id, chain_store.value(e.alpha).clone());
        }
        for id in full.edges() {
            if id.from > 0 && id.to != id.from + 1 {
                dag.set_enabled(id, false).unwrap();
            }
        }
        let shape: &[usize] = if kind == ChainKind::Linear { &[2, 3] } else { &[2, 3, 3] };
        let a = random_tensor(&mut rng, shape);
        let b = random_tensor(&mut rng, shape);
        let yd = forward_chain(&dag, &dag_store, &a, &b);
        let yc = forward_chain(&chain, &chain_store, &a, &b);
        assert_eq!(yd, yc, "{kind:?}");
    }
}

#[test]
fn saturated_mixture_equals_discrete_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (kind, shape) in [(ChainKind::Linear, vec![3, 4]), (ChainKind::Sequence, vec![2, 3, 4])] {
        for trial in 0..6 {
            let mut store = ParamStore::new();
            let chain = CellChain::new(&ChainSpec::full(kind, 3, Topology::Dag, 4), &mut store, "c", trial).unwrap();
            for e in &chain.edges {
                let n = e.ops.len();
                let hot = rng.random_range(0..n);
                let logits: Vec<f64> = (0..n).map(|k| if k == hot { 30.0 } else { 0.0 }).collect();
                assert!(softmax(&logits)[hot] > 1.0 - 1e-9);
                store.set_value(e.alpha, Tensor::vector(&logits));
            }
            let a = random_tensor(&mut rng, &shape);
            let b = random_tensor(&mut rng, &shape);
            let mixed = forward_chain(&chain, &store, &a, &b);
            let discrete = chain.discretize(&store);
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let bv = g.constant(b.clone());
            let y = discrete.forward(&mut g, &store, av, bv).unwrap();
            for (m, d) in mixed.data().iter().zip(g.value(y).data()) {
                assert!((m - d).abs() < 1e-6, "{kind:?}: {m} vs {d}");
            }
        }
    }
}

fn transform_names(chain: &CellChain, edge: usize) -> Vec<&'static str> {
    chain.edges[edge].ops.iter().map(Operator::name).collect()
}

#[test]
fn pruning_drops_one_candidate_per_transformation_edge() {
    let mut store = ParamStore::new();
    let chain = CellChain::new(&ChainSpec::full(ChainKind::Linear, 3, Topology::Chain, 2), &mut store, "c", 0).unwrap();
    assert_eq!(chain.min_transform_ops(), Some(7));
    let pruned = chain.prune_lowest(&mut store).unwrap();
    assert_eq!(pruned.min_transform_ops(), Some(6));
    assert_eq!(pruned.edges[0].ops.len(), 4);
    for e in &pruned.edges {
        assert_eq!(store.value(e.alpha).len(), e.ops.len());
    }
}

#[test]
fn pruning_removes_the_lightest_operator() {
    let mut store = ParamStore::new();
    let s = spec(ChainKind::Linear, 2, Topology::Chain, 2, &["Sum"], &["ReLU", "Tanh", "Skip"]);
    let chain = CellChain::new(&s, &mut store, "c", 0).unwrap();
    let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|w| w.ln()).collect();
    store.set_value(chain.edges[1].alpha, Tensor::vector(&logits));
    let pruned = chain.prune_lowest(&mut store).unwrap();
    assert_eq!(transform_names(&pruned, 1), vec!["ReLU", "Tanh"]);
    assert_eq!(store.value(pruned.edges[1].alpha).data(), &logits[..2]);
}

/// Removal order by plain search: repeatedly drop the smallest logit, the
/// last one on ties.
fn removal_oracle(names: &[&'static str], logits: &[f64]) -> Vec<Vec<&'static str>> {
    let mut items: Vec<(&'static str, f64)> = names.iter().copied().zip(logits.iter().copied()).collect();
    let mut out = vec![items.iter().map(|x| x.0).collect::<Vec<_>>()];
    while items.len() > 1 {
        let mut worst = 0;
        for i in 1..items.len() {
            if items[i].1 <= items[worst].1 {
                worst = i;
            }
        }
        items.remove(worst);
        out.push(items.iter().map(|x| x.0).collect());
    }
    out
}

#[test]
fn prune_to_one_follows_removal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (kind, trial) in [ChainKind::Linear, ChainKind::Sequence].into_iter().flat_map(|k| (0..10).map(move |t| (k, t))) {
        let mut store = ParamStore::new();
        let mut chain = CellChain::new(&ChainSpec::full(kind, 3, Topology::Chain, 2), &mut store, "c", trial).unwrap();
        for e in &chain.edges {
            // Coarse values so ties occur.
            let logits: Vec<f64> = (0..e.ops.len()).map(|_| f64::from(rng.random_range(0..3u8))).collect();
            store.set_value(e.alpha, Tensor::vector(&logits));
        }
        let oracles: Vec<Vec<Vec<&str>>> = (1..chain.edges.len())
            .map(|i| removal_oracle(&transform_names(&chain, i), store.value(chain.edges[i].alpha).data()))
            .collect();
        let mut step = 0;
        loop {
            for (i, oracle) in oracles.iter().enumerate() {
                assert_eq!(transform_names(&chain, i + 1), oracle[step], "{kind:?} trial {trial} step {step}");
            }
            if chain.min_transform_ops() == Some(1) {
                break;
            }
            chain = chain.prune_lowest(&mut store).unwrap();
            step += 1;
        }
        assert!(chain.prune_lowest(&mut store).is_err());
    }
}

proptest! {
    #[test]
    fn softmax_is_normalised(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let w = softmax(&logits);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties(
        logits in prop::collection::vec(-3i8..3, 1..10),
        dup in 0usize..10,
    ) {
        let mut v: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
        let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let d = dup % v.len();
        v[d] = top;
        let first = v.iter().position(|&x| x == top).unwrap();
        prop_assert_eq!(argmax(&v), first);
        prop_assert_eq!(argmax(&v), argmax(&v.clone()));
        let low = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let last = v.iter().rposition(|&x| x == low).unwrap();
        prop_assert_eq!(argmin_last(&v), last);
    }
}
