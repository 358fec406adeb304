//! Two-layer concat baseline: pooled text and image vectors are
//! concatenated (zeros for an absent modality) and classified by
//! `Linear -> ReLU -> Linear -> sigmoid`.

use rand::seq::SliceRandom;

use crate::autograd::{named_rng, Graph, Method, Optimizer, OptimizerConfig, ParamStore, Var};
use crate::config::TrainConfig;
use crate::data::{Batch, DatasetSplit, Sample};
use crate::error::{MuseError, Result};
use crate::model::bce_loss;
use crate::nn::Linear;
use crate::paths::Dims;

#[derive(Clone, Debug)]
pub struct ConcatBaseline {
    pub store: ParamStore,
    pub fc1: Linear,
    pub fc2: Linear,
    pub seed: u64,
}

impl ConcatBaseline {
    pub fn new(dims: Dims, hidden: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let fc1 = Linear::new(&mut store, "baseline.fc1", dims.d_t + dims.d_v, hidden, seed)?;
        let fc2 = Linear::new(&mut store, "baseline.fc2", hidden, 1, seed)?;
        Ok(ConcatBaseline { store, fc1, fc2, seed })
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let t = g.constant(batch.text.clone());
        let i = g.constant(batch.image.clone());
        let t = g.mean(t, 1)?;
        let i = g.mean(i, 1)?;
        let x = g.concat(&[t, i], 1)?;
        let h = self.fc1.forward(g, &self.store, x)?;
        let h = g.relu(h);
        let y = self.fc2.forward(g, &self.store, h)?;
        let y = g.reshape(y, &[batch.len()])?;
        Ok(g.sigmoid(y))
    }

    pub fn predict(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut g = Graph::new();
            let y = self.forward(&mut g, &Batch::from_samples(&refs)?)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    fn accuracy(&self, samples: &[Sample], batch_size: usize) -> Result<f64> {
        let p = self.predict(samples, batch_size)?;
        let hits = p.iter().zip(samples).filter(|(p, s)| u8::from(**p >= 0.5) == s.label).count();
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Trains on the train split for `epochs`, keeping the parameters with
    /// the best validation accuracy.
    pub fn train(&mut self, split: &DatasetSplit, cfg: &TrainConfig, epochs: usize) -> Result<()> {
        if split.train.is_empty() || split.valid.is_empty() {
            return Err(MuseError::Data("baseline needs non-empty train and valid splits".into()));
        }
        let method = if cfg.optimizer == "sgd" { Method::Sgd } else { Method::adam() };
        let ids = self.store.ids().collect();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                method,
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
            },
            ids,
        )?;
        let mut rng = named_rng(self.seed, "baseline.batches");
        let mut best = (self.accuracy(&split.valid, cfg.batch_size)?, self.store.snapshot());
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let refs: Vec<&Sample> = chunk.iter().map(|&i| &split.train[i]).collect();
                let batch = Batch::from_samples(&refs)?;
                self.store.zero_grad();
                let mut g = Graph::new();
                let y = self.forward(&mut g, &batch)?;
                let loss = bce_loss(&mut g, y, &batch.labels)?;
                if !g.value(loss).item().is_finite() {
                    return Err(MuseError::Numeric("non-finite baseline loss".into()));
                }
                g.backward_into(loss, &mut self.store)?;
                opt.step(&mut self.store);
                self.store.zero_grad();
            }
            let acc = self.accuracy(&split.valid, cfg.batch_size)?;
            if acc > best.0 {
                best = (acc, self.store.snapshot());
            }
        }
        self.store.restore(&best.1);
        Ok(())
    }
}
