//! The assembled model: guidance, the three paths and the score combiner.

mod checkpoint;
mod train;

pub use checkpoint::{checkpoint_text, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint};
pub use train::{
    batch_plan, bilevel_search, evaluate, retrain_discrete, EpochLog, TrainOutcome,
};

use crate::autograd::{sigmoid, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::cells::{ChainKind, ChainSpec, DiscreteChain, DiscreteEdge, EdgeId};
use crate::config::{Combiner, ModelConfig, StaticVariant};
use crate::data::Batch;
use crate::error::{MuseError, Result};
use crate::features::{partial_rule_batch, Guidance};
use crate::paths::{Dims, DynamicChain, LinearPath, PathConfig, PathInput, PathOutput, SequencePath, StaticPath};

/// Lower clamp applied to probabilities inside the loss.
pub const BCE_EPS: f64 = 1e-7;

/// Maps a raw path score into `(0, 1)`.
pub fn scale(x: f64) -> f64 {
    sigmoid(x)
}

/// Scalar form of the outer-sigmoid combiner.
pub fn combine(y: [f64; 3], weights: [f64; 3]) -> f64 {
    let s: f64 = (0..3).map(|k| weights[k] * scale(y[k])).sum();
    sigmoid(s)
}

/// Scalar binary cross entropy with the probability clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce(y: f64, label: f64) -> f64 {
    let p = y.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Mean BCE of probabilities `y: [B]` against 0/1 `labels`.
pub fn bce_loss(g: &mut Graph, y: Var, labels: &[f64]) -> Result<Var> {
    let b = labels.len();
    if g.shape(y) != [b] {
        return Err(MuseError::Shape {
            op: "bce",
            lhs: g.shape(y).to_vec(),
            rhs: vec![b],
        });
    }
    let p = g.clamp(y, BCE_EPS, 1.0 - BCE_EPS);
    let lp = g.unary(p, crate::autograd::Unary::Log);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let lq = g.unary(q, crate::autograd::Unary::Log);
    let yl = g.constant(Tensor::vector(labels));
    let nl = g.constant(Tensor::vector(&labels.iter().map(|l| 1.0 - l).collect::<Vec<_>>()));
    let a = g.mul(yl, lp)?;
    let c = g.mul(nl, lq)?;
    let s = g.add(a, c)?;
    let m = g.mean_all(s);
    Ok(g.neg(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Search,
    Discrete,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Search => "search",
            Mode::Discrete => "discrete",
        }
    }
}

/// Candidate list of one edge, and the chosen operator in discrete mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeStructure {
    pub path: ChainKind,
    pub id: EdgeId,
    pub ops: Vec<String>,
    pub chosen: Option<String>,
}

/// Everything beyond the config needed to rebuild a model's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    pub mode: Mode,
    pub edges: Vec<EdgeStructure>,
}

/// Forward results for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// Final probabilities `[B]`.
    pub y: Var,
    /// Linear, sequence and static path outputs, when the path exists.
    pub paths: [Option<PathOutput>; 3],
}

#[derive(Clone, Debug)]
pub struct Muse {
    pub config: ModelConfig,
    pub dims: Dims,
    pub seed: u64,
    pub store: ParamStore,
    pub guidance: Guidance,
    pub linear: Option<LinearPath>,
    pub sequence: Option<SequencePath>,
    pub auxiliary: Option<StaticPath>,
    /// Combiner weights beta, gamma, delta; `None` for a missing path.
    pub weights: [Option<ParamId>; 3],
    /// Offset inside the outer sigmoid, starting at 0.
    pub bias: Option<ParamId>,
    pub mode: Mode,
    /// Candidate lists at discretization time.
    candidates: Vec<EdgeStructure>,
}

fn chain_spec(cfg: &ModelConfig, kind: ChainKind) -> ChainSpec {
    match kind {
        ChainKind::Linear => ChainSpec {
            kind,
            depth: cfg.linear_depth,
            topology: cfg.topology,
            width: cfg.hidden,
            fusion_ops: cfg.fusion_ops.clone(),
            transform_ops: cfg.linear_ops.clone(),
        },
        ChainKind::Sequence => ChainSpec {
            kind,
            depth: cfg.sequence_depth,
            topology: cfg.topology,
            width: cfg.hidden,
            fusion_ops: vec!["Concat".into()],
            transform_ops: cfg.sequence_ops.clone(),
        },
    }
}

impl Muse {
    /// Builds a model in search mode. Every parameter draws its initial
    /// value from a stream keyed by its name, so leaving out a path leaves
    /// the remaining parameters unchanged.
    pub fn new(config: &ModelConfig, dims: Dims, seed: u64) -> Result<Self> {
        let paths = config.paths;
        if config.static_variant == StaticVariant::ClusterReference && paths.auxiliary && !paths.linear && !paths.sequence
        {
            return Err(MuseError::Config(
                "cluster_reference needs at least one dynamic path to reference".into(),
            ));
        }
        let mut store = ParamStore::new();
        let guidance = Guidance::new(&mut store, "guidance", dims.d_t, dims.d_v, seed)?;
        let linear = if paths.linear {
            Some(LinearPath::new(&mut store, &chain_spec(config, ChainKind::Linear), dims, seed)?)
        } else {
            None
        };
        let sequence = if paths.sequence {
            Some(SequencePath::new(&mut store, &chain_spec(config, ChainKind::Sequence), dims, seed)?)
        } else {
            None
        };
        let auxiliary = if paths.auxiliary {
            Some(StaticPath::new(&mut store, &PathConfig::from_model(config), dims, seed)?)
        } else {
            None
        };
        let mut weights = [None; 3];
        for (k, (on, name)) in [(paths.linear, "beta"), (paths.sequence, "gamma"), (paths.auxiliary, "delta")]
            .into_iter()
            .enumerate()
        {
            if on {
                weights[k] = Some(store.add(format!("combine.{name}"), Tensor::scalar(1.0), ParamGroup::Weights)?);
            }
        }
        let bias = match config.combiner {
            Combiner::OuterSigmoid => Some(store.add("combine.bias", Tensor::scalar(0.0), ParamGroup::Weights)?),
            Combiner::Softmax => None,
        };
        Ok(Muse {
            config: config.clone(),
            dims,
            seed,
            store,
            guidance,
            linear,
            sequence,
            auxiliary,
            weights,
            bias,
            mode: Mode::Search,
            candidates: Vec::new(),
        })
    }

    /// Rebuilds a model and restricts it to `structure`; parameter values
    /// are the fresh initial ones.
    pub fn with_structure(config: &ModelConfig, dims: Dims, seed: u64, structure: &Structure) -> Result<Self> {
        let mut m = Muse::new(config, dims, seed)?;
        for es in &structure.edges {
            let chain = m
                .chain_mut(es.path)
                .ok_or_else(|| MuseError::Config(format!("structure names missing {} path", es.path.as_str())))?;
            let DynamicChain::Mixed(c) = chain else {
                unreachable!("fresh models are mixed")
            };
            let idx = c
                .edge_index(es.id)
                .ok_or_else(|| MuseError::Config(format!("structure names unknown {}", es.id)))?;
            let edge = &mut c.edges[idx];
            let mut kept = Vec::new();
            for name in &es.ops {
                let op = edge
                    .ops
                    .iter()
                    .find(|o| o.name() == name)
                    .ok_or_else(|| MuseError::Config(format!("{}: `{name}` is not a candidate", es.id)))?;
                kept.push(op.clone());
            }
            edge.ops = kept;
            let alpha = edge.alpha;
            m.store.set_value(alpha, Tensor::zeros(&[es.ops.len()]));
        }
        if structure.mode == Mode::Discrete {
            for kind in [ChainKind::Linear, ChainKind::Sequence] {
                let Some(chain) = m.chain(kind) else { continue };
                let mixed = chain.mixed().expect("fresh models are mixed").clone();
                let mut edges = Vec::new();
                for e in &mixed.edges {
                    let chosen = structure
                        .edges
                        .iter()
                        .find(|s| s.path == kind && s.id == e.id)
                        .and_then(|s| s.chosen.clone())
                        .ok_or_else(|| MuseError::Config(format!("no chosen operator for {}", e.id)))?;
                    let choice = e
                        .ops
                        .iter()
                        .position(|o| o.name() == chosen)
                        .ok_or_else(|| MuseError::Config(format!("{}: `{chosen}` is not a candidate", e.id)))?;
                    edges.push(DiscreteEdge {
                        id: e.id,
                        op: e.ops[choice].clone(),
                        choice,
                    });
                }
                *m.chain_mut(kind).expect("present") = DynamicChain::Discrete(DiscreteChain {
                    kind,
                    depth: mixed.depth,
                    edges,
                });
            }
            m.candidates = structure
                .edges
                .iter()
                .map(|e| EdgeStructure {
                    chosen: None,
                    ..e.clone()
                })
                .collect();
            m.freeze_arch();
            m.mode = Mode::Discrete;
        }
        Ok(m)
    }

    pub fn structure(&self) -> Structure {
        let mut edges = Vec::new();
        for kind in [ChainKind::Linear, ChainKind::Sequence] {
            match self.chain(kind) {
                Some(DynamicChain::Mixed(c)) => {
                    for e in &c.edges {
                        edges.push(EdgeStructure {
                            path: kind,
                            id: e.id,
                            ops: e.ops.iter().map(|o| o.name().to_string()).collect(),
                            chosen: None,
                        });
                    }
                }
                Some(DynamicChain::Discrete(c)) => {
                    for e in &c.edges {
                        let ops = self
                            .candidates
                            .iter()
                            .find(|s| s.path == kind && s.id == e.id)
                            .map_or_else(|| vec![e.op.name().to_string()], |s| s.ops.clone());
                        edges.push(EdgeStructure {
                            path: kind,
                            id: e.id,
                            ops,
                            chosen: Some(e.op.name().to_string()),
                        });
                    }
                }
                None => {}
            }
        }
        Structure { mode: self.mode, edges }
    }

    pub fn chain(&self, kind: ChainKind) -> Option<&DynamicChain> {
        match kind {
            ChainKind::Linear => self.linear.as_ref().map(|p| &p.chain),
            ChainKind::Sequence => self.sequence.as_ref().map(|p| &p.chain),
        }
    }

    pub fn chain_mut(&mut self, kind: ChainKind) -> Option<&mut DynamicChain> {
        match kind {
            ChainKind::Linear => self.linear.as_mut().map(|p| &mut p.chain),
            ChainKind::Sequence => self.sequence.as_mut().map(|p| &mut p.chain),
        }
    }

    /// Logit parameters of the live mixed edges.
    pub fn arch_params(&self) -> Vec<ParamId> {
        [ChainKind::Linear, ChainKind::Sequence]
            .into_iter()
            .filter_map(|k| self.chain(k))
            .flat_map(DynamicChain::arch_params)
            .collect()
    }

    /// Every trainable non-logit parameter.
    pub fn weight_params(&self) -> Vec<ParamId> {
        self.store.ids_in(ParamGroup::Weights)
    }

    fn freeze_arch(&mut self) {
        for id in self.store.ids_in(ParamGroup::Arch) {
            self.store.set_requires_grad(id, false);
        }
    }

    /// Sets a combiner weight and stops it from training.
    pub fn freeze_weight(&mut self, path: usize, value: f64) -> Result<()> {
        let id = self.weights.get(path).copied().flatten().ok_or_else(|| {
            MuseError::Config(format!("combiner weight {path} belongs to a missing path"))
        })?;
        self.store.set_value(id, Tensor::scalar(value));
        self.store.set_requires_grad(id, false);
        Ok(())
    }

    /// Replaces both mixed chains by their argmax architectures.
    pub fn discretize(&mut self) {
        if self.mode == Mode::Search {
            self.candidates = self.structure().edges;
        }
        for kind in [ChainKind::Linear, ChainKind::Sequence] {
            let store = &self.store;
            let chain = match kind {
                ChainKind::Linear => self.linear.as_mut().map(|p| &mut p.chain),
                ChainKind::Sequence => self.sequence.as_mut().map(|p| &mut p.chain),
            };
            if let Some(c) = chain {
                c.discretize(store);
            }
        }
        self.freeze_arch();
        self.mode = Mode::Discrete;
    }

    /// Drops the weakest candidate on every transformation edge of `kind`.
    pub fn prune_lowest(&mut self, kind: ChainKind) -> Result<()> {
        let chain = match kind {
            ChainKind::Linear => self.linear.as_mut().map(|p| &mut p.chain),
            ChainKind::Sequence => self.sequence.as_mut().map(|p| &mut p.chain),
        };
        match chain {
            Some(DynamicChain::Mixed(c)) => {
                *c = c.prune_lowest(&mut self.store)?;
                Ok(())
            }
            Some(DynamicChain::Discrete(_)) => Err(MuseError::Contract("cannot prune a discrete chain".into())),
            None => Err(MuseError::Config(format!("no {} path to prune", kind.as_str()))),
        }
    }

    /// Path-labelled genotype text.
    pub fn genotype(&self) -> String {
        let mut out = String::new();
        for kind in [ChainKind::Linear, ChainKind::Sequence] {
            if let Some(c) = self.chain(kind) {
                out.push_str(&format!("[{}]\n", kind.as_str()));
                out.push_str(&c.genotype(&self.store));
            }
        }
        if let Some(s) = &self.auxiliary {
            let name = match s {
                StaticPath::Siamese(_) => "siamese",
                StaticPath::ClusterReference(_) => "cluster_reference",
            };
            out.push_str(&format!("[static]\n{name}\n"));
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<ForwardOut> {
        let text = g.constant(batch.text.clone());
        let image = g.constant(batch.image.clone());
        let (te, ie) = partial_rule_batch(g, &self.store, &self.guidance, text, image, &batch.presence)?;
        let input = PathInput {
            text: te,
            image: ie,
            presence: &batch.presence,
        };
        let p1 = self.linear.as_ref().map(|p| p.forward(g, &self.store, &input)).transpose()?;
        let p2 = self.sequence.as_ref().map(|p| p.forward(g, &self.store, &input)).transpose()?;
        let p3 = match &self.auxiliary {
            None => None,
            Some(StaticPath::Siamese(s)) => Some(s.forward(g, &self.store, &input)?),
            Some(StaticPath::ClusterReference(c)) => {
                let reference = match (p1, p2) {
                    (Some(a), Some(b)) => {
                        let s = g.add(a.y, b.y)?;
                        g.scale(s, 0.5)
                    }
                    (Some(a), None) => a.y,
                    (None, Some(b)) => b.y,
                    (None, None) => unreachable!("rejected at construction"),
                };
                Some(c.forward(g, &input, reference)?)
            }
        };
        let paths = [p1, p2, p3];
        let y = self.combine_graph(g, &paths)?;
        Ok(ForwardOut { y, paths })
    }

    fn combine_graph(&self, g: &mut Graph, paths: &[Option<PathOutput>; 3]) -> Result<Var> {
        let mut scaled = Vec::new();
        let mut weights = Vec::new();
        for k in 0..3 {
            if let (Some(p), Some(w)) = (paths[k], self.weights[k]) {
                scaled.push(g.sigmoid(p.y));
                weights.push(g.param(&self.store, w));
            }
        }
        match self.config.combiner {
            Combiner::OuterSigmoid => {
                let mut acc: Option<Var> = None;
                for (s, w) in scaled.iter().zip(&weights) {
                    let t = g.scale_by(*s, *w)?;
                    acc = Some(match acc {
                        None => t,
                        Some(a) => g.add(a, t)?,
                    });
                }
                let mut acc = acc.expect("at least one path");
                if let Some(b) = self.bias {
                    let b = g.param(&self.store, b);
                    let ones = g.constant(Tensor::ones(g.shape(acc)));
                    let b = g.scale_by(ones, b)?;
                    acc = g.add(acc, b)?;
                }
                Ok(g.sigmoid(acc))
            }
            Combiner::Softmax => {
                let parts: Vec<Var> = weights
                    .iter()
                    .map(|&w| g.reshape(w, &[1]))
                    .collect::<Result<_>>()?;
                let logits = g.concat(&parts, 0)?;
                let mix = g.softmax(logits, 0)?;
                let mut acc: Option<Var> = None;
                for (k, s) in scaled.iter().enumerate() {
                    let wk = g.select(mix, 0, k)?;
                    let t = g.scale_by(*s, wk)?;
                    acc = Some(match acc {
                        None => t,
                        Some(a) => g.add(a, t)?,
                    });
                }
                Ok(acc.expect("at least one path"))
            }
        }
    }

    /// Mean BCE of the model on `batch`.
    pub fn loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let out = self.forward(g, batch)?;
        bce_loss(g, out.y, &batch.labels)
    }

    pub fn loss_value(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, batch)?;
        Ok(g.value(l).item())
    }

    /// Probabilities for one batch.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        let y = g.value(out.y);
        if !y.all_finite() {
            return Err(MuseError::Numeric("non-finite prediction".into()));
        }
        Ok(y.data().to_vec())
    }

    /// Loss gradients for every parameter reached by the loss.
    pub fn gradients(&mut self, batch: &Batch) -> Result<Vec<(ParamId, Tensor)>> {
        self.store.zero_grad();
        let mut g = Graph::new();
        let l = self.loss(&mut g, batch)?;
        g.backward_into(l, &mut self.store)?;
        let out = self
            .store
            .ids()
            .filter_map(|id| self.store.grad(id).map(|t| (id, t.clone())))
            .collect();
        self.store.zero_grad();
        Ok(out)
    }
}
