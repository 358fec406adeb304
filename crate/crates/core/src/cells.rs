//! Continuous relaxation of operator choice over a chain of cells.
//!
//! Nodes are numbered from 0: node 0 is the modality pair, nodes `1..=n`
//! are cells. Edge `(0,1)` is the fusion edge; every other edge carries a
//! transformation. In `Chain` topology cell `j` has the single incoming edge
//! `(j-1, j)`; in `Dag` topology it sums mixed edges from every cell `i < j`.
//! Each mixed edge computes `sum_o softmax(alpha)_o * o(h)`.

use std::fmt;

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{MuseError, Result};
use crate::searchspace::{CellInput, OpKind, Operator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChainKind {
    Linear,
    Sequence,
}

impl ChainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainKind::Linear => "linear",
            ChainKind::Sequence => "sequence",
        }
    }

    pub fn fusion_kind(self) -> OpKind {
        match self {
            ChainKind::Linear => OpKind::Fusion,
            ChainKind::Sequence => OpKind::SeqFusion,
        }
    }

    pub fn transform_kind(self) -> OpKind {
        match self {
            ChainKind::Linear => OpKind::LinearTransform,
            ChainKind::Sequence => OpKind::SeqTransform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    Chain,
    Dag,
}

impl Topology {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Topology::Chain),
            "dag" => Ok(Topology::Dag),
            other => Err(MuseError::Config(format!("unknown topology `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Chain => "chain",
            Topology::Dag => "dag",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeId {
    pub from: usize,
    pub to: usize,
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "edge({},{})", self.from, self.to)
    }
}

/// Shape of a chain before instantiation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub kind: ChainKind,
    /// Number of cells, fusion cell included.
    pub depth: usize,
    pub topology: Topology,
    pub width: usize,
    pub fusion_ops: Vec<String>,
    pub transform_ops: Vec<String>,
}

impl ChainSpec {
    /// Full registries for both cell kinds.
    pub fn full(kind: ChainKind, depth: usize, topology: Topology, width: usize) -> Self {
        let names = |k: OpKind| k.registry().iter().map(|s| s.to_string()).collect();
        ChainSpec {
            kind,
            depth,
            topology,
            width,
            fusion_ops: names(kind.fusion_kind()),
            transform_ops: names(kind.transform_kind()),
        }
    }

    pub fn edges(&self) -> Vec<EdgeId> {
        let mut v = vec![EdgeId { from: 0, to: 1 }];
        for to in 2..=self.depth {
            match self.topology {
                Topology::Chain => v.push(EdgeId { from: to - 1, to }),
                Topology::Dag => v.extend((1..to).map(|from| EdgeId { from, to })),
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedEdge {
    pub id: EdgeId,
    pub ops: Vec<Operator>,
    /// Logits over `ops`, one per candidate.
    pub alpha: ParamId,
    pub enabled: bool,
}

/// A searchable path body: one fusion cell followed by transformation cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellChain {
    pub kind: ChainKind,
    pub topology: Topology,
    pub depth: usize,
    pub width: usize,
    pub edges: Vec<MixedEdge>,
}

/// Logits of every edge, with the operator names they weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchWeights {
    pub edges: Vec<(EdgeId, Vec<&'static str>, Vec<f64>)>,
}

/// Softmax of a logit vector, max-subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest value; ties go to the highest index so that
/// earlier registry entries survive pruning, mirroring [`argmax`].
pub fn argmin_last(values: &[f64]) -> usize {
    let mut worst = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v <= values[worst] {
            worst = i;
        }
    }
    worst
}

impl ArchWeights {
    pub fn softmax(&self, edge: usize) -> Vec<f64> {
        softmax(&self.edges[edge].2)
    }
}

/// Mixed operator: softmax(alpha)-weighted sum of every candidate's output.
pub fn mixed_op(g: &mut Graph, store: &ParamStore, input: CellInput, alpha: Var, ops: &[Operator]) -> Result<Var> {
    if ops.is_empty() {
        return Err(MuseError::Config("mixed edge with an empty operator set".into()));
    }
    if g.shape(alpha) != [ops.len()] {
        return Err(MuseError::Shape {
            op: "mixed_op",
            lhs: g.shape(alpha).to_vec(),
            rhs: vec![ops.len()],
        });
    }
    let weights = g.softmax(alpha, 0)?;
    let mut acc: Option<Var> = None;
    for (o, op) in ops.iter().enumerate() {
        let out = op.forward(g, store, input)?;
        let w = g.select(weights, 0, o)?;
        let term = g.scale_by(out, w)?;
        acc = Some(match acc {
            None => term,
            Some(s) => {
                if g.shape(s) != g.shape(term) {
                    return Err(MuseError::Shape {
                        op: "mixed_op",
                        lhs: g.shape(s).to_vec(),
                        rhs: g.shape(term).to_vec(),
                    });
                }
                g.add(s, term)?
            }
        });
    }
    Ok(acc.expect("non-empty operator set"))
}

/// Shared evaluation of cell nodes given a per-edge evaluator.
fn evaluate<'a>(
    g: &mut Graph,
    kind: ChainKind,
    depth: usize,
    edges: impl Iterator<Item = (usize, EdgeId)> + Clone,
    a: Var,
    b: Var,
    mut edge_fn: impl FnMut(&mut Graph, usize, CellInput) -> Result<Var> + 'a,
) -> Result<Var> {
    let mut nodes: Vec<Option<Var>> = vec![None; depth + 1];
    for to in 1..=depth {
        let mut acc: Option<Var> = None;
        for (idx, id) in edges.clone().filter(|(_, id)| id.to == to) {
            let input = if id.from == 0 {
                CellInput::Pair(a, b)
            } else {
                match nodes[id.from] {
                    Some(h) => CellInput::Single(h),
                    None => continue,
                }
            };
            let out = edge_fn(g, idx, input)?;
            acc = Some(match acc {
                None => out,
                Some(s) => g.add(s, out)?,
            });
        }
        nodes[to] = acc;
    }
    let last = nodes[depth].ok_or_else(|| {
        MuseError::Config(format!("{} chain: final cell {depth} is unreachable", kind.as_str()))
    })?;
    match kind {
        ChainKind::Linear => Ok(last),
        ChainKind::Sequence => g.mean(last, 1),
    }
}

impl CellChain {
    /// Instantiates every candidate on every edge. Operator parameters live
    /// under `{prefix}.edge{i}_{j}`; logits start at zero (uniform mixture).
    pub fn new(spec: &ChainSpec, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self> {
        if spec.depth == 0 || spec.width == 0 {
            return Err(MuseError::Config("chain depth and width must be at least 1".into()));
        }
        let mut edges = Vec::new();
        for id in spec.edges() {
            let (kind, names) = if id.from == 0 {
                (spec.kind.fusion_kind(), &spec.fusion_ops)
            } else {
                (spec.kind.transform_kind(), &spec.transform_ops)
            };
            if names.is_empty() {
                return Err(MuseError::Config(format!(
                    "{} chain {id}: empty operator set",
                    spec.kind.as_str()
                )));
            }
            let eprefix = format!("{prefix}.edge{}_{}", id.from, id.to);
            let mut ops = Vec::with_capacity(names.len());
            for name in names {
                let op = Operator::instantiate(kind, name, spec.width, store, &eprefix, seed)?;
                if ops.iter().any(|o: &Operator| o.name() == op.name()) {
                    return Err(MuseError::Config(format!("duplicate operator {} on {id}", op.name())));
                }
                ops.push(op);
            }
            let alpha = store.add(format!("{eprefix}.alpha"), Tensor::zeros(&[ops.len()]), ParamGroup::Arch)?;
            edges.push(MixedEdge {
                id,
                ops,
                alpha,
                enabled: true,
            });
        }
        Ok(CellChain {
            kind: spec.kind,
            topology: spec.topology,
            depth: spec.depth,
            width: spec.width,
            edges,
        })
    }

    pub fn edge_index(&self, id: EdgeId) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }

    pub fn set_enabled(&mut self, id: EdgeId, enabled: bool) -> Result<()> {
        let i = self
            .edge_index(id)
            .ok_or_else(|| MuseError::Config(format!("no {id} in {} chain", self.kind.as_str())))?;
        self.edges[i].enabled = enabled;
        Ok(())
    }

    pub fn arch_params(&self) -> Vec<ParamId> {
        self.edges.iter().map(|e| e.alpha).collect()
    }

    pub fn weight_params(&self) -> Vec<ParamId> {
        self.edges.iter().flat_map(|e| e.ops.iter().flat_map(Operator::params)).collect()
    }

    pub fn arch_weights(&self, store: &ParamStore) -> ArchWeights {
        ArchWeights {
            edges: self
                .edges
                .iter()
                .map(|e| {
                    (
                        e.id,
                        e.ops.iter().map(Operator::name).collect(),
                        store.value(e.alpha).data().to_vec(),
                    )
                })
                .collect(),
        }
    }

    /// Inputs: `[B, D]` pair for linear chains, `[B, K, D]` pair for
    /// sequence chains. Sequence output is mean-pooled over positions.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let edges = self.edges.iter().enumerate().filter(|(_, e)| e.enabled).map(|(i, e)| (i, e.id));
        evaluate(g, self.kind, self.depth, edges, a, b, |g, idx, input| {
            let e = &self.edges[idx];
            let alpha = g.param(store, e.alpha);
            mixed_op(g, store, input, alpha, &e.ops)
        })
    }

    /// Keeps the highest-logit operator (lowest index on ties) of every
    /// enabled edge together with its trained parameters.
    pub fn discretize(&self, store: &ParamStore) -> DiscreteChain {
        let edges = self
            .edges
            .iter()
            .filter(|e| e.enabled)
            .map(|e| {
                let choice = argmax(store.value(e.alpha).data());
                DiscreteEdge {
                    id: e.id,
                    op: e.ops[choice].clone(),
                    choice,
                }
            })
            .collect();
        DiscreteChain {
            kind: self.kind,
            depth: self.depth,
            edges,
        }
    }

    /// Fewest candidates on any enabled transformation edge.
    pub fn min_transform_ops(&self) -> Option<usize> {
        self.edges.iter().filter(|e| e.enabled && e.id.from > 0).map(|e| e.ops.len()).min()
    }

    /// Drops the lowest-weight candidate from every enabled transformation
    /// edge and writes the surviving logits back into `store`. The fusion
    /// edge keeps its candidates. `self` must not be used afterwards.
    pub fn prune_lowest(&self, store: &mut ParamStore) -> Result<CellChain> {
        let mut next = self.clone();
        for e in next.edges.iter_mut().filter(|e| e.enabled && e.id.from > 0) {
            if e.ops.len() < 2 {
                return Err(MuseError::Contract(format!(
                    "{} chain {}: cannot prune below one operator",
                    self.kind.as_str(),
                    e.id
                )));
            }
        }
        for e in next.edges.iter_mut().filter(|e| e.enabled && e.id.from > 0) {
            let logits = store.value(e.alpha).data().to_vec();
            let drop = argmin_last(&softmax(&logits));
            e.ops.remove(drop);
            let kept: Vec<f64> = logits
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != drop)
                .map(|(_, &x)| x)
                .collect();
            store.set_value(e.alpha, Tensor::vector(&kept));
        }
        Ok(next)
    }

    /// One line per enabled edge: `edge(i,j): best_op [softmax weights]`.
    pub fn genotype(&self, store: &ParamStore) -> String {
        let mut out = String::new();
        for e in self.edges.iter().filter(|e| e.enabled) {
            let w = softmax(store.value(e.alpha).data());
            let best = argmax(&w);
            out.push_str(&format!("{}: {} [{}]\n", e.id, e.ops[best].name(), fmt_weights(&w)));
        }
        out
    }
}

pub(crate) fn fmt_weights(w: &[f64]) -> String {
    w.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteEdge {
    pub id: EdgeId,
    pub op: Operator,
    /// Index the operator had in its mixed edge.
    pub choice: usize,
}

/// The argmax architecture: exactly one operator per retained edge and no
/// softmax anywhere in its forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteChain {
    pub kind: ChainKind,
    pub depth: usize,
    pub edges: Vec<DiscreteEdge>,
}

impl DiscreteChain {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let edges = self.edges.iter().enumerate().map(|(i, e)| (i, e.id));
        evaluate(g, self.kind, self.depth, edges, a, b, |g, idx, input| {
            self.edges[idx].op.forward(g, store, input)
        })
    }

    pub fn weight_params(&self) -> Vec<ParamId> {
        self.edges.iter().flat_map(|e| e.op.params()).collect()
    }

    pub fn genotype(&self) -> String {
        self.edges
            .iter()
            .map(|e| format!("{}: {} [{}]\n", e.id, e.op.name(), fmt_weights(&[1.0])))
            .collect()
    }
}
