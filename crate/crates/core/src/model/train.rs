//! Bilevel search, discrete retraining and batched evaluation.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{named_rng, Graph, Method, Optimizer, OptimizerConfig};
use crate::config::{StaticVariant, TrainConfig};
use crate::data::{Batch, DatasetSplit, Sample};
use crate::error::{MuseError, Result};

use super::{Mode, Muse};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub genotype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based; 0 means the initial state).
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

/// Splits `0..n` into batches of `batch_size`, optionally shuffled. A tail
/// shorter than `min_size` joins the previous batch.
pub fn batch_plan(n: usize, batch_size: usize, min_size: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(MuseError::Data("empty split".into()));
    }
    if n < min_size {
        return Err(MuseError::Config(format!(
            "split of {n} samples is smaller than the cluster count {min_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let size = batch_size.max(min_size);
    let mut plan: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if plan.len() > 1 && plan.last().is_some_and(|b| b.len() < min_size) {
        let tail = plan.pop().expect("non-empty");
        plan.last_mut().expect("non-empty").extend(tail);
    }
    Ok(plan)
}

fn min_batch(model: &Muse) -> usize {
    match (&model.auxiliary, model.config.static_variant) {
        (Some(_), StaticVariant::ClusterReference) => model.config.cluster_k,
        _ => 1,
    }
}

fn batch_of(samples: &[Sample], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    Batch::from_samples(&refs)
}

/// Probabilities for `samples`, in order.
pub fn evaluate(model: &Muse, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    let plan = batch_plan(samples.len(), batch_size, min_batch(model), None)?;
    let mut out = Vec::with_capacity(samples.len());
    for idx in plan {
        out.extend(model.predict_batch(&batch_of(samples, &idx)?)?);
    }
    Ok(out)
}

fn accuracy(model: &Muse, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let p = evaluate(model, samples, batch_size)?;
    let hits = p
        .iter()
        .zip(samples)
        .filter(|(p, s)| u8::from(**p >= 0.5) == s.label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

fn optimizer(cfg: &TrainConfig, lr: f64, weight_decay: f64, ids: Vec<crate::autograd::ParamId>) -> Result<Optimizer> {
    let method = match cfg.optimizer.as_str() {
        "sgd" => Method::Sgd,
        _ => Method::adam(),
    };
    Optimizer::new(
        OptimizerConfig {
            method,
            lr,
            weight_decay,
        },
        ids,
    )
}

fn step(model: &mut Muse, batch: &Batch, opt: &mut Optimizer, what: &str) -> Result<f64> {
    model.store.zero_grad();
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(MuseError::Numeric(format!("non-finite {what} loss")));
    }
    g.backward_into(loss, &mut model.store)?;
    opt.step(&mut model.store);
    model.store.zero_grad();
    Ok(value)
}

/// Shared epoch loop. With `search`, every weight step on a training batch
/// is followed by a first-order logit step on the next validation batch.
fn run(model: &mut Muse, split: &DatasetSplit, cfg: &TrainConfig, epochs: usize, phase: &str, search: bool) -> Result<TrainOutcome> {
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(MuseError::Data("training needs non-empty train and valid splits".into()));
    }
    if epochs == 0 {
        return Err(MuseError::Config(format!("{phase}: epochs must be at least 1")));
    }
    let min = min_batch(model);
    let mut w_opt = optimizer(cfg, cfg.lr, cfg.weight_decay, model.weight_params())?;
    let arch_step = search && cfg.arch_lr > 0.0 && model.mode == Mode::Search;
    let mut a_opt = if arch_step {
        Some(optimizer(cfg, cfg.arch_lr, cfg.arch_weight_decay, model.arch_params())?)
    } else {
        None
    };
    let mut train_rng = named_rng(model.seed, &format!("{phase}.train_batches"));
    let mut valid_rng = named_rng(model.seed, &format!("{phase}.valid_batches"));
    let mut valid_plan: Vec<Vec<usize>> = Vec::new();

    let mut best = (0, accuracy(model, &split.valid, cfg.batch_size)?, model.store.snapshot());
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let plan = batch_plan(split.train.len(), cfg.batch_size, min, Some(&mut train_rng))?;
        let mut total = 0.0;
        for idx in &plan {
            total += step(model, &batch_of(&split.train, idx)?, &mut w_opt, "training")?;
            if let Some(a_opt) = a_opt.as_mut() {
                if valid_plan.is_empty() {
                    valid_plan = batch_plan(split.valid.len(), cfg.batch_size, min, Some(&mut valid_rng))?;
                    valid_plan.reverse();
                }
                let vidx = valid_plan.pop().expect("refilled");
                step(model, &batch_of(&split.valid, &vidx)?, a_opt, "architecture")?;
            }
        }
        let valid_accuracy = accuracy(model, &split.valid, cfg.batch_size)?;
        logs.push(EpochLog {
            epoch,
            train_loss: total / plan.len() as f64,
            valid_accuracy,
            genotype: model.genotype(),
        });
        if valid_accuracy > best.1 {
            best = (epoch, valid_accuracy, model.store.snapshot());
        }
    }
    model.store.restore(&best.2);
    Ok(TrainOutcome {
        epochs: logs,
        best_epoch: best.0,
        best_valid_accuracy: best.1,
    })
}

/// Alternating first-order search over weights (train split) and logits
/// (valid split) for `cfg.epochs` epochs. `arch_lr = 0` skips logit steps.
/// The parameters with the best validation accuracy are kept.
pub fn bilevel_search(model: &mut Muse, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if model.mode != Mode::Search {
        return Err(MuseError::Contract("search needs a model in search mode".into()));
    }
    run(model, split, cfg, cfg.epochs, "search", true)
}

/// Discretizes (if needed) and trains the weights of the argmax model for
/// `cfg.retrain_epochs`. Without warm start the weights are re-initialised.
pub fn retrain_discrete(model: &mut Muse, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if model.mode == Mode::Search {
        model.discretize();
    }
    if !cfg.retrain_warm_start {
        let fresh = Muse::with_structure(&model.config, model.dims, model.seed, &model.structure())?;
        *model = fresh;
    }
    run(model, split, cfg, cfg.retrain_epochs, "retrain", false)
}
