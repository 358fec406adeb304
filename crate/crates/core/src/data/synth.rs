//! Synthetic multimodal data with a planted cross-modal rule.
//!
//! Each modality of a sample is a global vector `g ~ N(0, I)` plus per-row
//! deviations `row_spread * N(0, I)`. The label reads the clean pooled
//! matrices through fixed unit directions `u` (text) and `v` (image):
//! `s_t = <u, pool(text)> / sigma_t` and likewise `s_i`, both standard
//! normal. Feature noise is added after labelling and every value is
//! rounded to `f32` so the binary feature format stores it exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{named_rng, Tensor};
use crate::config::{DataConfig, Rule};
use crate::error::{MuseError, Result};
use crate::features::{FeatureMatrix, Modality};
use crate::paths::Dims;

use super::{DatasetSplit, Provenance, Sample};

/// `c` with `P(max(Z1, Z2) > c) = 1/2` for independent standard normals,
/// i.e. `Phi(c) = sqrt(1/2)`.
pub const MAX_RULE_THRESHOLD: f64 = 0.544_952_135_617_360_4;

/// The planted unit directions and the pooled-projection scales.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedDirections {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma_t: f64,
    pub sigma_v: f64,
}

impl PlantedDirections {
    pub fn new(cfg: &DataConfig, seed: u64) -> Self {
        let mut rng = named_rng(seed, "synthetic.directions");
        let mut unit = |d: usize| {
            let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let u = unit(cfg.d_t);
        let v = unit(cfg.d_v);
        let s2 = cfg.row_spread * cfg.row_spread;
        PlantedDirections {
            u,
            v,
            sigma_t: (1.0 + s2 / cfg.k_t as f64).sqrt(),
            sigma_v: (1.0 + s2 / cfg.k_v as f64).sqrt(),
        }
    }

    /// Standardised projections `(s_t, s_i)` of two clean matrices.
    pub fn projections(&self, text: &Tensor, image: &Tensor) -> (f64, f64) {
        let proj = |m: &Tensor, dir: &[f64], sigma: f64| {
            let k = m.shape()[0];
            let mut acc = 0.0;
            for r in 0..k {
                acc += m.row(r).iter().zip(dir).map(|(x, d)| x * d).sum::<f64>();
            }
            acc / k as f64 / sigma
        };
        (proj(text, &self.u, self.sigma_t), proj(image, &self.v, self.sigma_v))
    }
}

/// Label of a sample with standardised projections `s_t`, `s_i`.
pub fn planted_score(rule: Rule, s_t: f64, s_i: f64) -> u8 {
    let fake = match rule {
        Rule::SumSeparable => s_t + s_i > 0.0,
        Rule::MaxSeparable => s_t.max(s_i) > MAX_RULE_THRESHOLD,
        Rule::Interaction => s_t * s_i > 0.0,
    };
    u8::from(fake)
}

fn clean_matrix(rng: &mut impl Rng, k: usize, d: usize, spread: f64) -> Tensor {
    let global: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        for g in &global {
            let e: f64 = rng.sample(StandardNormal);
            data.push(g + spread * e);
        }
    }
    Tensor::new(vec![k, d], data).expect("positive dims")
}

fn noisy_f32(rng: &mut impl Rng, clean: &Tensor, noise: f64) -> Tensor {
    let data = clean
        .data()
        .iter()
        .map(|x| {
            let e: f64 = rng.sample(StandardNormal);
            f64::from((x + noise * e) as f32)
        })
        .collect();
    Tensor::new(clean.shape().to_vec(), data).expect("same shape")
}

/// Generates, labels, drops modalities and splits a synthetic dataset.
///
/// Missingness uses one uniform draw per sample: text is dropped below
/// `missing_text_rate`, image in the next `missing_image_rate` of the unit
/// interval, so both marginal rates are exact and no sample loses both.
/// With `partial` set, [`corrupt_partial`] runs on the complete data.
pub fn generate_synthetic(cfg: &DataConfig, seed: u64) -> Result<DatasetSplit> {
    if cfg.missing_text_rate + cfg.missing_image_rate > 1.0 {
        return Err(MuseError::Config(format!(
            "missing rates {} + {} exceed 1: some sample would lose both modalities",
            cfg.missing_text_rate, cfg.missing_image_rate
        )));
    }
    if cfg.partial && (cfg.missing_text_rate > 0.0 || cfg.missing_image_rate > 0.0) {
        return Err(MuseError::Config(
            "data.partial needs complete samples; set both missing rates to 0".into(),
        ));
    }
    if cfg.n < 3 {
        return Err(MuseError::Config("data.n must be at least 3".into()));
    }
    let dirs = PlantedDirections::new(cfg, seed);
    let mut rng = named_rng(seed, "synthetic.samples");
    let mut miss = named_rng(seed, "synthetic.missing");
    let mut samples = Vec::with_capacity(cfg.n);
    for idx in 0..cfg.n {
        let text = clean_matrix(&mut rng, cfg.k_t, cfg.d_t, cfg.row_spread);
        let image = clean_matrix(&mut rng, cfg.k_v, cfg.d_v, cfg.row_spread);
        let (st, si) = dirs.projections(&text, &image);
        let label = planted_score(cfg.rule, st, si);
        let text = noisy_f32(&mut rng, &text, cfg.noise);
        let image = noisy_f32(&mut rng, &image, cfg.noise);
        let draw: f64 = miss.random();
        let drop_text = draw < cfg.missing_text_rate;
        let drop_image = !drop_text && draw < cfg.missing_text_rate + cfg.missing_image_rate;
        let mut t = FeatureMatrix::present(Modality::Text, text)?;
        let mut i = FeatureMatrix::present(Modality::Image, image)?;
        if drop_text {
            t = t.into_absent();
        }
        if drop_image {
            i = i.into_absent();
        }
        samples.push(Sample::new(format!("s{idx:05}"), t, i, label)?);
    }

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut named_rng(seed, "synthetic.split"));
    let n_test = (cfg.n as f64 * cfg.test_fraction).round() as usize;
    let n_valid = ((cfg.n - n_test) as f64 * cfg.valid_fraction).round() as usize;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |range: &[usize]| -> Vec<Sample> {
        let mut idx = range.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| slots[i].take().expect("each index once")).collect()
    };
    let test = take(&order[..n_test]);
    let valid = take(&order[n_test..n_test + n_valid]);
    let train = take(&order[n_test + n_valid..]);
    let dims = Dims {
        k_t: cfg.k_t,
        d_t: cfg.d_t,
        k_v: cfg.k_v,
        d_v: cfg.d_v,
    };
    let ds = DatasetSplit::new(train, valid, test, seed, Provenance::Synthetic, dims)?;
    if cfg.partial {
        corrupt_partial(&ds, seed)
    } else {
        Ok(ds)
    }
}

/// Removes exactly one modality from every sample by a fair coin per
/// sample, visiting train, valid and test in order.
pub fn corrupt_partial(ds: &DatasetSplit, seed: u64) -> Result<DatasetSplit> {
    if let Some(s) = ds.all().find(|s| !s.is_complete()) {
        return Err(MuseError::Contract(format!(
            "corrupt_partial needs complete samples; `{}` is already partial",
            s.id
        )));
    }
    let mut rng = named_rng(seed, "corrupt_partial");
    let mut out = ds.clone();
    for s in out.all_mut() {
        if rng.random::<bool>() {
            s.text = s.text.clone().into_absent();
        } else {
            s.image = s.image.clone().into_absent();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn small(n: usize) -> DataConfig {
        DataConfig {
            n,
            ..Config::default().data
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let cfg = small(60);
        let a = generate_synthetic(&cfg, 5).unwrap();
        let b = generate_synthetic(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert_eq!(a.test.len(), 12);
        assert_eq!(a.valid.len(), 24);
        let c = generate_synthetic(&cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_rates_rejected() {
        let mut cfg = small(10);
        cfg.missing_text_rate = 0.7;
        cfg.missing_image_rate = 0.4;
        assert!(matches!(generate_synthetic(&cfg, 1), Err(MuseError::Config(_))));
    }

    #[test]
    fn corrupting_partial_data_is_contract_error() {
        let mut cfg = small(10);
        cfg.missing_image_rate = 1.0;
        let ds = generate_synthetic(&cfg, 1).unwrap();
        assert!(matches!(corrupt_partial(&ds, 1), Err(MuseError::Contract(_))));
    }
}
