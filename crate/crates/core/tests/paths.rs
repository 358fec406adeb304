use muse_core::autograd::{Graph, ParamStore, Tensor, Unary};
use muse_core::cells::{softmax, ChainKind, ChainSpec, Topology};
use muse_core::config::{Config, StaticVariant};
use muse_core::data::{Batch, Sample};
use muse_core::features::{FeatureMatrix, Modality, Presence};
use muse_core::model::Muse;
use muse_core::nn::Linear;
use muse_core::paths::{kmeans, ClusterReference, Dims, LinearPath, PathInput, SequencePath, SiamesePath};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: Dims = Dims {
    k_t: 3,
    d_t: 4,
    k_v: 2,
    d_v: 3,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// `x W + b` by loops over stored values.
fn fc(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight);
    let b = store.value(l.bias);
    (0..l.outputs)
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w.at(&[i, j])).sum::<f64>() + b.data()[j])
        .collect()
}

fn pooled(t: &Tensor, s: usize) -> Vec<f64> {
    let (k, d) = (t.shape()[1], t.shape()[2]);
    (0..d).map(|j| (0..k).map(|r| t.at(&[s, r, j])).sum::<f64>() / k as f64).collect()
}

fn spec(kind: ChainKind, depth: usize, width: usize, fusion: &[&str], transform: &[&str]) -> ChainSpec {
    ChainSpec {
        kind,
        depth,
        topology: Topology::Chain,
        width,
        fusion_ops: fusion.iter().map(|s| s.to_string()).collect(),
        transform_ops: transform.iter().map(|s| s.to_string()).collect(),
    }
}

fn presence(text: &[bool], image: &[bool]) -> Presence {
    Presence {
        text: text.to_vec(),
        image: image.to_vec(),
    }
}

#[test]
fn linear_path_without_text_reduces_to_image_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let path = LinearPath::new(&mut store, &spec(ChainKind::Linear, 3, 5, &["Sum"], &["Skip"]), DIMS, 3).unwrap();
    let text = Tensor::zeros(&[2, DIMS.k_t, DIMS.d_t]);
    let image = random(&mut rng, &[2, DIMS.k_v, DIMS.d_v]);
    let p = presence(&[false, false], &[true, true]);
    let mut g = Graph::new();
    let input = PathInput {
        text: g.constant(text),
        image: g.constant(image.clone()),
        presence: &p,
    };
    let out = path.forward(&mut g, &store, &input).unwrap();
    for s in 0..2 {
        let expect = fc(&store, &path.image_fc, &pooled(&image, s));
        for (j, e) in expect.iter().enumerate() {
            assert!((g.value(out.z).at(&[s, j]) - e).abs() < 1e-12);
        }
        let y = fc(&store, &path.head, g.value(out.z).row(s));
        assert!((g.value(out.y).data()[s] - y[0]).abs() < 1e-12);
    }
}

#[test]
fn linear_path_matches_composition_oracle() {
    let fusion = ["Sum", "Max", "Average"];
    let acts = [("Sigmoid", Unary::Sigmoid), ("Tanh", Unary::Tanh), ("Softsign", Unary::Softsign)];
    let transform = ["Sigmoid", "Tanh", "Softsign", "Skip"];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10 {
        let mut store = ParamStore::new();
        let path = LinearPath::new(&mut store, &spec(ChainKind::Linear, 3, 4, &fusion, &transform), DIMS, trial).unwrap();
        let chain = path.chain.mixed().unwrap();
        for e in &chain.edges {
            let logits: Vec<f64> = (0..e.ops.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            store.set_value(e.alpha, Tensor::vector(&logits));
        }
        let text = random(&mut rng, &[3, DIMS.k_t, DIMS.d_t]);
        let image = random(&mut rng, &[3, DIMS.k_v, DIMS.d_v]);
        let p = presence(&[true, false, true], &[true, true, false]);
        let mut g = Graph::new();
        let input = PathInput {
            text: g.constant(text.clone()),
            image: g.constant(image.clone()),
            presence: &p,
        };
        let out = path.forward(&mut g, &store, &input).unwrap();
        let w: Vec<Vec<f64>> = chain.edges.iter().map(|e| softmax(store.value(e.alpha).data())).collect();
        for s in 0..3 {
            let mut t = fc(&store, &path.text_fc, &pooled(&text, s));
            let mut i = fc(&store, &path.image_fc, &pooled(&image, s));
            if !p.text[s] {
                t.iter_mut().for_each(|x| *x = 0.0);
            }
            if !p.image[s] {
                i.iter_mut().for_each(|x| *x = 0.0);
            }
            let mut h: Vec<f64> = (0..4)
                .map(|j| w[0][0] * (t[j] + i[j]) + w[0][1] * t[j].max(i[j]) + w[0][2] * 0.5 * (t[j] + i[j]))
                .collect();
            for we in &w[1..] {
                h = h
                    .iter()
                    .map(|&x| acts.iter().enumerate().map(|(k, (_, u))| we[k] * u.apply(x)).sum::<f64>() + we[3] * x)
                    .collect();
            }
            for j in 0..4 {
                assert!((g.value(out.z).at(&[s, j]) - h[j]).abs() < 1e-12);
            }
            let y = fc(&store, &path.head, &h)[0];
            assert!((g.value(out.y).data()[s] - y).abs() < 1e-12);
        }
    }
}

#[test]
fn all_skip_sequence_path_is_mean_of_projected_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for dims in [DIMS, Dims { k_t: 1, d_t: 2, k_v: 1, d_v: 3 }] {
        let mut store = ParamStore::new();
        let path = SequencePath::new(&mut store, &spec(ChainKind::Sequence, 3, 4, &["Concat"], &["Skip"]), dims, 0).unwrap();
        let text = random(&mut rng, &[2, dims.k_t, dims.d_t]);
        let image = random(&mut rng, &[2, dims.k_v, dims.d_v]);
        let p = presence(&[true, true], &[true, false]);
        let mut g = Graph::new();
        let input = PathInput {
            text: g.constant(text.clone()),
            image: g.constant(image.clone()),
            presence: &p,
        };
        let out = path.forward(&mut g, &store, &input).unwrap();
        assert_eq!(g.shape(out.z), &[2, 4]);
        assert_eq!(g.shape(out.y), &[2]);
        for s in 0..2 {
            let mut acc = vec![0.0; 4];
            for r in 0..dims.k_t {
                let row: Vec<f64> = (0..dims.d_t).map(|j| text.at(&[s, r, j])).collect();
                acc.iter_mut().zip(fc(&store, &path.text_fc, &row)).for_each(|(a, v)| *a += v);
            }
            if p.image[s] {
                for r in 0..dims.k_v {
                    let row: Vec<f64> = (0..dims.d_v).map(|j| image.at(&[s, r, j])).collect();
                    acc.iter_mut().zip(fc(&store, &path.image_fc, &row)).for_each(|(a, v)| *a += v);
                }
            }
            let n = (dims.k_t + dims.k_v) as f64;
            for j in 0..4 {
                assert!((g.value(out.z).at(&[s, j]) - acc[j] / n).abs() < 1e-12);
            }
        }
    }
}

fn siamese_oracle(store: &ParamStore, p: &SiamesePath, text: &[f64], image: &[f64], t_on: bool, i_on: bool) -> (f64, Vec<f64>) {
    let enc = |x: Vec<f64>| -> Vec<f64> {
        let h: Vec<f64> = fc(store, &p.encoder[0], &x).iter().map(|v| v.tanh()).collect();
        fc(store, &p.encoder[1], &h)
    };
    let mut et = enc(fc(store, &p.text_proj, text));
    let mut ei = enc(fc(store, &p.image_proj, image));
    if !t_on {
        et.iter_mut().for_each(|x| *x = 0.0);
    }
    if !i_on {
        ei.iter_mut().for_each(|x| *x = 0.0);
    }
    let dot: f64 = et.iter().zip(&ei).map(|(a, b)| a * b).sum();
    let na = et.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = ei.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    (cos, et.iter().zip(&ei).map(|(a, b)| (a - b).abs()).collect())
}

#[test]
fn siamese_features_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let path = SiamesePath::new(&mut store, 5, DIMS, 6).unwrap();
    let text = random(&mut rng, &[3, DIMS.k_t, DIMS.d_t]);
    let image = random(&mut rng, &[3, DIMS.k_v, DIMS.d_v]);
    let p = presence(&[true, false, true], &[true, true, false]);
    let mut g = Graph::new();
    let input = PathInput {
        text: g.constant(text.clone()),
        image: g.constant(image.clone()),
        presence: &p,
    };
    let out = path.forward(&mut g, &store, &input).unwrap();
    assert_eq!(g.shape(out.z), &[3, 6]);
    for s in 0..3 {
        let (cos, diff) = siamese_oracle(&store, &path, &pooled(&text, s), &pooled(&image, s), p.text[s], p.image[s]);
        let z = g.value(out.z).row(s).to_vec();
        assert!((z[0] - cos).abs() < 1e-12, "{} vs {cos}", z[0]);
        for (a, b) in z[1..].iter().zip(&diff) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // Text absent in sample 1: cosine is exactly zero.
    assert_eq!(g.value(out.z).at(&[1, 0]), 0.0);
}

#[test]
fn siamese_identical_inputs_have_unit_cosine() {
    let dims = Dims { k_t: 2, d_t: 3, k_v: 2, d_v: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let path = SiamesePath::new(&mut store, 4, dims, 0).unwrap();
    for (a, b) in [(path.text_proj.weight, path.image_proj.weight), (path.text_proj.bias, path.image_proj.bias)] {
        let v = store.value(a).clone();
        store.set_value(b, v);
    }
    let x = random(&mut rng, &[2, 2, 3]);
    let p = presence(&[true, true], &[true, true]);
    let mut g = Graph::new();
    let input = PathInput {
        text: g.constant(x.clone()),
        image: g.constant(x),
        presence: &p,
    };
    let (et, ei) = path.embed(&mut g, &store, &input).unwrap();
    assert_eq!(g.value(et), g.value(ei), "shared encoder must give bit-identical embeddings");
    let out = path.forward(&mut g, &store, &input).unwrap();
    for s in 0..2 {
        assert!((g.value(out.z).at(&[s, 0]) - 1.0).abs() < 1e-12);
        assert!(g.value(out.z).row(s)[1..].iter().all(|&d| d == 0.0));
    }
}

fn sse(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let d = members[0].len();
        let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|p| p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>()).sum::<f64>();
    }
    total
}

/// Same partition up to relabelling.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn kmeans_finds_exhaustive_optimum_on_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = 3;
    for _ in 0..20 {
        let centres: Vec<Vec<f64>> = (0..k).map(|c| vec![10.0 * c as f64, rng.random_range(-20.0..20.0)]).collect();
        let points: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let c = &centres[if i < k { i } else { rng.random_range(0..k) }];
                c.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect()
            })
            .collect();
        let got = kmeans(&points, k, 50).unwrap();
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..k.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
            let e = sse(&points, &assign, k);
            if e < best.0 {
                best = (e, assign);
            }
        }
        assert!(same_partition(&got.assignment, &best.1), "{:?} vs {:?}", got.assignment, best.1);
    }
}

fn cluster_scores(points: &[Vec<f64>], scores: &[f64], k: usize) -> Vec<f64> {
    let d = points[0].len();
    let text = Tensor::new(vec![points.len(), 1, d], points.concat()).unwrap();
    let image = Tensor::zeros(&[points.len(), 1, 1]);
    let p = presence(&vec![true; points.len()], &vec![true; points.len()]);
    let mut g = Graph::new();
    let input = PathInput {
        text: g.constant(text),
        image: g.constant(image),
        presence: &p,
    };
    let s = g.constant(Tensor::vector(scores));
    let out = ClusterReference { k, max_iters: 30 }.forward(&mut g, &input, s).unwrap();
    g.value(out.y).data().to_vec()
}

#[test]
fn cluster_reference_matches_leave_one_out_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let n = rng.random_range(3..9);
        let points: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let assign = kmeans(&points, 2, 30).unwrap().assignment;
        let y = cluster_scores(&points, &scores, 2);
        for s in 0..n {
            let mut sum = 0.0;
            let mut count = 0;
            for o in 0..n {
                if o != s && assign[o] == assign[s] {
                    sum += scores[o];
                    count += 1;
                }
            }
            let expect = if count == 0 { scores[s] } else { sum / count as f64 };
            assert!((y[s] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cluster_reference_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let n = rng.random_range(4..12);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = cluster_scores(&points, &scores, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pp: Vec<Vec<f64>> = perm.iter().map(|&i| points[i].clone()).collect();
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let yp = cluster_scores(&pp, &ps, 3);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(yp[j], y[i]);
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, id: usize, dims: Dims, text: bool, image: bool) -> Sample {
    let t = if text {
        FeatureMatrix::present(Modality::Text, random(rng, &[dims.k_t, dims.d_t])).unwrap()
    } else {
        FeatureMatrix::absent(Modality::Text, dims.k_t, dims.d_t).unwrap()
    };
    let i = if image {
        FeatureMatrix::present(Modality::Image, random(rng, &[dims.k_v, dims.d_v])).unwrap()
    } else {
        FeatureMatrix::absent(Modality::Image, dims.k_v, dims.d_v).unwrap()
    };
    Sample::new(format!("s{id}"), t, i, (id % 2) as u8).unwrap()
}

#[test]
fn every_presence_pattern_gives_finite_outputs_without_reading_absent_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for variant in [StaticVariant::Siamese, StaticVariant::ClusterReference] {
        let mut cfg = Config::default();
        cfg.model.hidden = 4;
        cfg.model.static_variant = variant;
        let model = Muse::new(&cfg.model, DIMS, 1).unwrap();
        let patterns = [(true, true), (false, true), (true, false)];
        let samples: Vec<Sample> = (0..6).map(|i| sample(&mut rng, i, DIMS, patterns[i % 3].0, patterns[i % 3].1)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch).unwrap();
        assert!(g.value(out.y).all_finite());
        for p in out.paths.iter().flatten() {
            assert!(g.value(p.z).all_finite());
            assert!(g.value(p.y).all_finite());
        }
        for s in &samples {
            if !s.text.is_present() {
                assert_eq!(s.text.read_count(), 0);
            }
            if !s.image.is_present() {
                assert_eq!(s.image.read_count(), 0);
            }
        }
    }
}

#[test]
fn sample_with_no_modality_is_rejected() {
    let t = FeatureMatrix::absent(Modality::Text, 1, 1).unwrap();
    let i = FeatureMatrix::absent(Modality::Image, 1, 1).unwrap();
    assert!(Sample::new("x", t, i, 0).is_err());
}
