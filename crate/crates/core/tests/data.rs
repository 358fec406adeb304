use muse_core::autograd::{named_rng, stable_hash, Tensor};
use muse_core::config::{Config, DataConfig, Rule};
use muse_core::data::{
    corrupt_partial, decode, encode, file_checksum, generate_synthetic, planted_score, read_features, read_jsonl,
    validate, write_features, write_jsonl, DatasetSplit, PlantedDirections, Provenance, Sample, MAX_RULE_THRESHOLD,
    VERSION_1, VERSION_2,
};
use muse_core::features::{FeatureMatrix, Modality};
use muse_core::paths::Dims;
use muse_core::MuseError;
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn data_config(n: usize) -> DataConfig {
    DataConfig {
        n,
        ..Config::default().data
    }
}

fn same_samples(a: &DatasetSplit, b: &DatasetSplit) -> bool {
    a.dims == b.dims && a.train == b.train && a.valid == b.valid && a.test == b.test
}

#[test]
fn prng_test_vectors() {
    assert_eq!(stable_hash(""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(stable_hash("a"), 0xaf63_dc4c_8601_ec8c);
    assert_eq!(stable_hash("foobar"), 0x8594_4171_f739_67e8);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        [r.next_u64(), r.next_u64(), r.next_u64()],
        [0xb585_f767_a79a_3b6c, 0x7746_a55f_bad8_c037, 0xb2fb_0d32_81e2_a6e6]
    );
    let mut r = named_rng(7, "synthetic.samples");
    assert_eq!(
        [r.next_u64(), r.next_u64(), r.next_u64()],
        [0x4452_b479_2200_6b05, 0xe115_1f7d_d137_7a12, 0x61d4_7e24_707c_656a]
    );
    let x: f64 = named_rng(7, "synthetic.missing").random();
    assert_eq!(x.to_bits(), 0x3fd7_5bc3_19de_b0ec);
}

#[test]
fn max_rule_threshold_splits_classes_evenly() {
    // Phi(c)^2 = 1/2 by composite Simpson integration of the normal density.
    let n = 20_000;
    let h = MAX_RULE_THRESHOLD / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(MAX_RULE_THRESHOLD);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    let phi = 0.5 + s * h / 3.0;
    assert!((phi * phi - 0.5).abs() < 1e-14, "{}", phi * phi);
}

#[test]
fn generation_is_deterministic_and_split_sizes_follow_rounding() {
    let cfg = data_config(1000);
    let a = generate_synthetic(&cfg, 3).unwrap();
    assert_eq!(a, generate_synthetic(&cfg, 3).unwrap());
    assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (400, 400, 200));
    assert_eq!(a.provenance, Provenance::Synthetic);
    let mut ids: Vec<&str> = a.all().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 1000);
}

#[test]
fn labels_are_balanced_within_binomial_bound() {
    let n = 1000;
    for seed in 1..=10 {
        let ds = generate_synthetic(&data_config(n), seed).unwrap();
        let fake = ds.all().filter(|s| s.label == 1).count() as f64;
        assert!((fake - n as f64 / 2.0).abs() <= 2.0 * (n as f64).sqrt(), "seed {seed}: {fake}");
    }
}

fn pooled_concat(s: &Sample) -> Vec<f64> {
    let pool = |m: &FeatureMatrix| -> Vec<f64> {
        let v = m.values();
        let (k, d) = (v.shape()[0], v.shape()[1]);
        (0..d).map(|j| (0..k).map(|r| v.at(&[r, j])).sum::<f64>() / k as f64).collect()
    };
    let mut x = pool(&s.text);
    x.extend(pool(&s.image));
    x
}

#[test]
fn noiseless_sum_rule_is_linearly_separable() {
    let mut cfg = data_config(200);
    cfg.noise = 0.0;
    cfg.test_fraction = 0.0;
    cfg.valid_fraction = 0.0;
    let ds = generate_synthetic(&cfg, 11).unwrap();
    let xs: Vec<(Vec<f64>, f64)> = ds
        .train
        .iter()
        .map(|s| (pooled_concat(s), if s.label == 1 { 1.0 } else { -1.0 }))
        .collect();
    // Perceptron probe: converges exactly when the pooled features separate.
    let d = xs[0].0.len();
    let mut w = vec![0.0; d + 1];
    let mut clean_epoch = false;
    for _ in 0..20_000 {
        let mut mistakes = 0;
        for (x, y) in &xs {
            let s: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if s * y <= 0.0 {
                mistakes += 1;
                for j in 0..d {
                    w[j] += y * x[j];
                }
                w[d] += y;
            }
        }
        if mistakes == 0 {
            clean_epoch = true;
            break;
        }
    }
    assert!(clean_epoch, "probe did not reach 100% train accuracy");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn labels_follow_the_planted_rule(seed in 0u64..10_000, rule in prop::sample::select(vec![Rule::SumSeparable, Rule::MaxSeparable, Rule::Interaction])) {
        let mut cfg = data_config(60);
        cfg.noise = 0.0;
        cfg.rule = rule;
        let ds = generate_synthetic(&cfg, seed).unwrap();
        let dirs = PlantedDirections::new(&cfg, seed);
        for s in ds.all() {
            let (st, si) = dirs.projections(s.text.values(), s.image.values());
            let margin = match rule {
                Rule::SumSeparable => (st + si).abs(),
                Rule::MaxSeparable => (st.max(si) - MAX_RULE_THRESHOLD).abs(),
                Rule::Interaction => st.abs().min(si.abs()),
            };
            if margin > 1e-5 {
                prop_assert_eq!(planted_score(rule, st, si), s.label);
            }
        }
    }
}

#[test]
fn full_text_missing_rate_drops_every_text() {
    let mut cfg = data_config(50);
    cfg.missing_text_rate = 1.0;
    let ds = generate_synthetic(&cfg, 2).unwrap();
    assert!(ds.all().all(|s| !s.text.is_present() && s.image.is_present()));
}

#[test]
fn missing_rates_are_respected_and_never_drop_both() {
    let mut cfg = data_config(2000);
    cfg.missing_text_rate = 0.2;
    cfg.missing_image_rate = 0.3;
    let ds = generate_synthetic(&cfg, 4).unwrap();
    let n = ds.len() as f64;
    let t = ds.all().filter(|s| !s.text.is_present()).count() as f64;
    let i = ds.all().filter(|s| !s.image.is_present()).count() as f64;
    assert!(ds.all().all(|s| s.text.is_present() || s.image.is_present()));
    assert!((t / n - 0.2).abs() < 3.0 * (0.2f64 * 0.8 / n).sqrt());
    assert!((i / n - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n).sqrt());
}

fn present_hash(ds: &DatasetSplit, keep: impl Fn(&Sample, Modality) -> bool) -> String {
    let mut h = Sha256::new();
    for s in ds.all() {
        h.update(s.id.as_bytes());
        h.update([s.label]);
        for (m, mat) in [(Modality::Text, &s.text), (Modality::Image, &s.image)] {
            if keep(s, m) {
                for x in mat.values().data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

#[test]
fn corrupt_partial_removes_exactly_one_modality_and_keeps_values() {
    let ds = generate_synthetic(&data_config(1000), 5).unwrap();
    let cp = corrupt_partial(&ds, 5).unwrap();
    assert_eq!(cp, corrupt_partial(&ds, 5).unwrap());
    assert!(cp.all().all(|s| s.text.is_present() != s.image.is_present()));
    let text_gone = cp.all().filter(|s| !s.text.is_present()).count() as f64;
    assert!((text_gone - 500.0).abs() < 3.0 * 1000f64.sqrt() / 2.0);
    // Labels and surviving values are untouched.
    let after = present_hash(&cp, |s, m| match m {
        Modality::Text => s.text.is_present(),
        Modality::Image => s.image.is_present(),
    });
    let ids: std::collections::HashMap<&str, &Sample> = cp.all().map(|s| (s.id.as_str(), s)).collect();
    let before = present_hash(&ds, |s, m| {
        let c = ids[s.id.as_str()];
        match m {
            Modality::Text => c.text.is_present(),
            Modality::Image => c.image.is_present(),
        }
    });
    assert_eq!(before, after);
    assert!(matches!(corrupt_partial(&cp, 5), Err(MuseError::Contract(_))));
}

fn small_split(lengths: bool) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = Dims {
        k_t: 3,
        d_t: 2,
        k_v: 2,
        d_v: 4,
    };
    let mut mk = |i: usize, text: bool, image: bool| {
        let mut m = |modality, k, d, on| {
            if on {
                let v: Vec<f64> = (0..k * d).map(|_| f64::from(rng.random_range(-3.0f32..3.0))).collect();
                FeatureMatrix::present(modality, Tensor::new(vec![k, d], v).unwrap()).unwrap()
            } else {
                FeatureMatrix::absent(modality, k, d).unwrap()
            }
        };
        let t = m(Modality::Text, 3, 2, text);
        let im = m(Modality::Image, 2, 4, image);
        let mut s = Sample::new(format!("id-{i}-é"), t, im, (i % 2) as u8).unwrap();
        if lengths && i % 2 == 0 {
            s.valid_lengths = Some((2, 1));
        }
        s
    };
    DatasetSplit::new(
        vec![mk(0, true, true), mk(1, false, true), mk(2, true, false)],
        vec![mk(3, true, true)],
        vec![mk(4, false, true), mk(5, true, true)],
        0,
        Provenance::File,
        dims,
    )
    .unwrap()
}

#[test]
fn musef_round_trips_both_versions() {
    for (lengths, version) in [(false, VERSION_1), (true, VERSION_2)] {
        let ds = small_split(lengths);
        let bytes = encode(&ds);
        assert_eq!(&bytes[..6], b"MUSEF\0");
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), version);
        let (back, v) = decode(&bytes).unwrap();
        assert_eq!(v, version);
        assert!(same_samples(&ds, &back));
        assert_eq!(encode(&back), bytes);
    }
}

#[test]
fn musef_file_io_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.musef");
    let ds = generate_synthetic(&data_config(40), 1).unwrap();
    write_features(&ds, &path).unwrap();
    let back = read_features(&path).unwrap();
    assert!(same_samples(&ds, &back));
    let summary = validate(&path).unwrap();
    assert_eq!(summary.version, VERSION_1);
    assert_eq!(summary.counts, [ds.train.len(), ds.valid.len(), ds.test.len()]);
    assert_eq!(summary.dims, ds.dims);
    assert_eq!(summary.checksum, file_checksum(&path).unwrap());
    assert_eq!(summary.checksum, muse_core::data::checksum(&back));
    let mut cfg = data_config(40);
    cfg.missing_image_rate = 0.5;
    let partial = generate_synthetic(&cfg, 1).unwrap();
    write_features(&partial, &path).unwrap();
    let summary = validate(&path).unwrap();
    assert_eq!(summary.image_absent, partial.all().filter(|s| !s.image.is_present()).count());
    assert_eq!(summary.text_absent, 0);
}

fn parse_error(bytes: &[u8]) -> (u64, String) {
    match decode(bytes) {
        Err(MuseError::Parse { offset, message }) => (offset, message),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn truncation_names_expected_and_actual_length() {
    let bytes = encode(&small_split(false));
    let cut = &bytes[..bytes.len() - 3];
    let (offset, message) = parse_error(cut);
    assert!(message.contains("expected 32 bytes, found 29"), "{message}");
    assert!(message.contains(&format!("file length {}", cut.len())), "{message}");
    assert_eq!(offset as usize, cut.len() - 29);
    let (offset, message) = parse_error(&bytes[..20]);
    assert_eq!(offset, 20);
    assert!(message.contains("expected 4 bytes, found 0"), "{message}");
}

#[test]
fn malformed_files_are_rejected_with_offsets() {
    let good = encode(&small_split(false));
    let first = 36;
    let id_len = u32::from_le_bytes(good[first..first + 4].try_into().unwrap()) as usize;
    let label_at = first + 4 + id_len;
    let mutate = |at: usize, value: u8| {
        let mut b = good.clone();
        b[at] = value;
        b
    };
    let cases: Vec<(Vec<u8>, u64, &str)> = vec![
        (mutate(0, b'X'), 0, "bad magic"),
        (mutate(6, 9), 6, "unsupported version"),
        (mutate(20, 0), 16, "zero dimension"),
        (mutate(label_at, 2), label_at as u64, "label 2"),
        (mutate(label_at + 1, 0), label_at as u64 + 1, "neither text nor image"),
        (mutate(label_at + 1, 0b111), label_at as u64 + 1, "unknown presence bits"),
        (mutate(first + 4, 0xff), first as u64 + 4, "not UTF-8"),
        ([good.clone(), vec![0]].concat(), good.len() as u64, "trailing"),
    ];
    for (bytes, offset, needle) in cases {
        let (o, m) = parse_error(&bytes);
        assert_eq!(o, offset, "{needle}: {m}");
        assert!(m.contains(needle), "{needle}: {m}");
    }
    let mut nan = good.clone();
    let value_at = label_at + 2;
    nan[value_at..value_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let (o, m) = parse_error(&nan);
    assert_eq!(o as usize, value_at);
    assert!(m.contains("non-finite"));
}

#[test]
fn musef_v2_rejects_lengths_beyond_rows() {
    let mut bytes = encode(&small_split(true));
    let first = 36;
    let id_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
    let lengths_at = first + 4 + id_len + 2;
    bytes[lengths_at..lengths_at + 4].copy_from_slice(&7u32.to_le_bytes());
    let (o, m) = parse_error(&bytes);
    assert_eq!(o as usize, lengths_at);
    assert!(m.contains("exceed"), "{m}");
}

#[test]
fn jsonl_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    for lengths in [false, true] {
        let ds = small_split(lengths);
        write_jsonl(&ds, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert!(same_samples(&ds, &back));
    }
    std::fs::write(&path, "{\"id\":\"a\",\"split\":\"train\",\"label\":0,\"text\":null,\"image\":null}\n").unwrap();
    assert!(read_jsonl(&path).is_err());
}
