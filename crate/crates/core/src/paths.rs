//! The three paths that turn an enhanced feature pair into class scores.
//!
//! The two dynamic paths wrap a searchable [`CellChain`] (or its discretized
//! form); the static path has a fixed structure. Every path works on a whole
//! batch: text `[B,K_T,D_T]`, image `[B,K_V,D_V]`. The projection of an
//! absent modality is zeroed, so a missing modality contributes nothing
//! beyond its zero placeholder.

use std::cmp::Ordering;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Unary, Var};
use crate::cells::{CellChain, ChainKind, ChainSpec, DiscreteChain, Topology};
use crate::config::{ModelConfig, StaticVariant};
use crate::error::{MuseError, Result};
use crate::features::Presence;
use crate::nn::Linear;

/// Feature dimensions of one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub k_t: usize,
    pub d_t: usize,
    pub k_v: usize,
    pub d_v: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathConfig {
    pub hidden: usize,
    pub linear_depth: usize,
    pub sequence_depth: usize,
    pub topology: Topology,
    pub static_variant: StaticVariant,
    pub cluster_k: usize,
    pub kmeans_iters: usize,
}

impl PathConfig {
    pub fn from_model(m: &ModelConfig) -> Self {
        PathConfig {
            hidden: m.hidden,
            linear_depth: m.linear_depth,
            sequence_depth: m.sequence_depth,
            topology: m.topology,
            static_variant: m.static_variant,
            cluster_k: m.cluster_k,
            kmeans_iters: m.kmeans_iters,
        }
    }
}

/// Batch input shared by all paths.
pub struct PathInput<'a> {
    pub text: Var,
    pub image: Var,
    pub presence: &'a Presence,
}

/// Outputs of one path for a batch: representation `z: [B, D_z]` and raw
/// class scores `y: [B]`.
#[derive(Clone, Copy, Debug)]
pub struct PathOutput {
    pub z: Var,
    pub y: Var,
}

fn mask_values(presence: &[bool]) -> Vec<f64> {
    presence.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
}

/// Multiplies each sample (leading axis) of `x` by its 0/1 mask entry.
pub(crate) fn mask_samples(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.first() != Some(&mask.len()) {
        return Err(MuseError::Shape {
            op: "mask",
            lhs: shape,
            rhs: vec![mask.len()],
        });
    }
    let mut m = g.constant(Tensor::vector(&mask_values(mask)));
    for (axis, &len) in shape.iter().enumerate().skip(1) {
        m = g.broadcast(m, axis, len)?;
    }
    g.mul(x, m)
}

/// A dynamic path body in either phase.
#[derive(Clone, Debug, PartialEq)]
pub enum DynamicChain {
    Mixed(CellChain),
    Discrete(DiscreteChain),
}

impl DynamicChain {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        match self {
            DynamicChain::Mixed(c) => c.forward(g, store, a, b),
            DynamicChain::Discrete(c) => c.forward(g, store, a, b),
        }
    }

    pub fn genotype(&self, store: &ParamStore) -> String {
        match self {
            DynamicChain::Mixed(c) => c.genotype(store),
            DynamicChain::Discrete(c) => c.genotype(),
        }
    }

    pub fn arch_params(&self) -> Vec<ParamId> {
        match self {
            DynamicChain::Mixed(c) => c.arch_params(),
            DynamicChain::Discrete(_) => Vec::new(),
        }
    }

    pub fn mixed(&self) -> Option<&CellChain> {
        match self {
            DynamicChain::Mixed(c) => Some(c),
            DynamicChain::Discrete(_) => None,
        }
    }

    pub fn discrete(&self) -> Option<&DiscreteChain> {
        match self {
            DynamicChain::Mixed(_) => None,
            DynamicChain::Discrete(c) => Some(c),
        }
    }

    pub fn discretize(&mut self, store: &ParamStore) {
        if let DynamicChain::Mixed(c) = self {
            *self = DynamicChain::Discrete(c.discretize(store));
        }
    }
}

fn head_scores(g: &mut Graph, store: &ParamStore, head: &Linear, z: Var) -> Result<Var> {
    let y = head.forward(g, store, z)?;
    let b = g.shape(y)[0];
    g.reshape(y, &[b])
}

/// Pools each modality, projects it to `D_h` and searches over the pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPath {
    pub text_fc: Linear,
    pub image_fc: Linear,
    pub chain: DynamicChain,
    pub head: Linear,
}

impl LinearPath {
    pub fn new(store: &mut ParamStore, spec: &ChainSpec, dims: Dims, seed: u64) -> Result<Self> {
        if spec.kind != ChainKind::Linear {
            return Err(MuseError::Config("linear path needs a linear chain".into()));
        }
        let h = spec.width;
        Ok(LinearPath {
            text_fc: Linear::new(store, "linear.text_fc", dims.d_t, h, seed)?,
            image_fc: Linear::new(store, "linear.image_fc", dims.d_v, h, seed)?,
            chain: DynamicChain::Mixed(CellChain::new(spec, store, "linear", seed)?),
            head: Linear::new(store, "linear.head", h, 1, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PathInput) -> Result<PathOutput> {
        let t = g.mean(input.text, 1)?;
        let i = g.mean(input.image, 1)?;
        let t = self.text_fc.forward(g, store, t)?;
        let i = self.image_fc.forward(g, store, i)?;
        let t = mask_samples(g, t, &input.presence.text)?;
        let i = mask_samples(g, i, &input.presence.image)?;
        let z = self.chain.forward(g, store, t, i)?;
        let y = head_scores(g, store, &self.head, z)?;
        Ok(PathOutput { z, y })
    }
}

/// Projects every row, concatenates the two sequences and searches over
/// sequence operators; the chain mean-pools its final cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePath {
    pub text_fc: Linear,
    pub image_fc: Linear,
    pub chain: DynamicChain,
    pub head: Linear,
}

impl SequencePath {
    pub fn new(store: &mut ParamStore, spec: &ChainSpec, dims: Dims, seed: u64) -> Result<Self> {
        if spec.kind != ChainKind::Sequence {
            return Err(MuseError::Config("sequence path needs a sequence chain".into()));
        }
        let h = spec.width;
        Ok(SequencePath {
            text_fc: Linear::new(store, "sequence.text_fc", dims.d_t, h, seed)?,
            image_fc: Linear::new(store, "sequence.image_fc", dims.d_v, h, seed)?,
            chain: DynamicChain::Mixed(CellChain::new(spec, store, "sequence", seed)?),
            head: Linear::new(store, "sequence.head", h, 1, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PathInput) -> Result<PathOutput> {
        let t = self.text_fc.forward(g, store, input.text)?;
        let i = self.image_fc.forward(g, store, input.image)?;
        let t = mask_samples(g, t, &input.presence.text)?;
        let i = mask_samples(g, i, &input.presence.image)?;
        let z = self.chain.forward(g, store, t, i)?;
        let y = head_scores(g, store, &self.head, z)?;
        Ok(PathOutput { z, y })
    }
}

/// Siamese similarity network: per-modality projection, one shared
/// two-layer encoder, features `[cos(e_t, e_i), |e_t - e_i|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiamesePath {
    pub text_proj: Linear,
    pub image_proj: Linear,
    pub encoder: [Linear; 2],
    pub head: Linear,
}

impl SiamesePath {
    pub fn new(store: &mut ParamStore, hidden: usize, dims: Dims, seed: u64) -> Result<Self> {
        Ok(SiamesePath {
            text_proj: Linear::new(store, "static.text_proj", dims.d_t, hidden, seed)?,
            image_proj: Linear::new(store, "static.image_proj", dims.d_v, hidden, seed)?,
            encoder: [
                Linear::new(store, "static.encoder1", hidden, hidden, seed)?,
                Linear::new(store, "static.encoder2", hidden, hidden, seed)?,
            ],
            head: Linear::new(store, "static.head", hidden + 1, 1, seed)?,
        })
    }

    /// The shared encoder applied to one `[B, D_h]` branch.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.encoder[0].forward(g, store, x)?;
        let h = g.tanh(h);
        self.encoder[1].forward(g, store, h)
    }

    /// Embeddings `(e_t, e_i)` with absent modalities set to zero.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, input: &PathInput) -> Result<(Var, Var)> {
        let t = g.mean(input.text, 1)?;
        let i = g.mean(input.image, 1)?;
        let t = self.text_proj.forward(g, store, t)?;
        let i = self.image_proj.forward(g, store, i)?;
        let et = self.encode(g, store, t)?;
        let ei = self.encode(g, store, i)?;
        let et = mask_samples(g, et, &input.presence.text)?;
        let ei = mask_samples(g, ei, &input.presence.image)?;
        Ok((et, ei))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &PathInput) -> Result<PathOutput> {
        let (et, ei) = self.embed(g, store, input)?;
        let b = g.shape(et)[0];
        let cos = cosine_rows(g, et, ei)?;
        let cos = g.reshape(cos, &[b, 1])?;
        let d = g.sub(et, ei)?;
        let d = g.unary(d, Unary::Abs);
        let z = g.concat(&[cos, d], 1)?;
        let y = head_scores(g, store, &self.head, z)?;
        Ok(PathOutput { z, y })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.text_proj.params();
        v.extend(self.image_proj.params());
        v.extend(self.encoder.iter().flat_map(Linear::params));
        v.extend(self.head.params());
        v
    }
}

/// Row-wise cosine of two `[B, D]` tensors; a zero row gives 0.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.l2_normalize(a, 1)?;
    let nb = g.l2_normalize(b, 1)?;
    let p = g.mul(na, nb)?;
    g.sum(p, 1)
}

/// Result of clustering a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with farthest-point initialisation.
///
/// The first centroid is the lexicographically smallest point; each next
/// one is the point farthest from the chosen set (smallest point on ties).
/// Assignment ties go to the lower centroid. Member sums run in sorted
/// order, so permuting the input permutes the assignment and nothing else.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(MuseError::Config(format!(
            "cluster count k={k} must lie in 1..={} (batch size)",
            points.len()
        )));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]));
    let mut centroids = vec![points[order[0]].clone()];
    while centroids.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for &p in &order {
            let d = centroids
                .iter()
                .map(|c| sq_dist(&points[p], c))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((p, d));
            }
        }
        centroids.push(points[best.expect("non-empty batch").0].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, cen) in centroids.iter().enumerate() {
                    let d = sq_dist(p, cen);
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let mut assignment = assign(&centroids);
    for _ in 0..max_iters {
        for (c, cen) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = order.iter().copied().filter(|&p| assignment[p] == c).collect();
            if members.is_empty() {
                continue;
            }
            let dim = cen.len();
            let mut sum = vec![0.0; dim];
            for &p in &members {
                for (s, x) in sum.iter_mut().zip(&points[p]) {
                    *s += x;
                }
            }
            *cen = sum.iter().map(|s| s / members.len() as f64).collect();
        }
        let next = assign(&centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(Clustering { assignment, centroids })
}

/// Leave-one-out cluster average of `scores`; a singleton keeps its own.
pub fn leave_one_out_means(assignment: &[usize], scores: &[f64]) -> Vec<f64> {
    (0..scores.len())
        .map(|s| {
            let mut others: Vec<f64> = (0..scores.len())
                .filter(|&o| o != s && assignment[o] == assignment[s])
                .map(|o| scores[o])
                .collect();
            if others.is_empty() {
                return scores[s];
            }
            others.sort_by(f64::total_cmp);
            others.iter().sum::<f64>() / others.len() as f64
        })
        .collect()
}

/// Sample-reference static path: clusters the batch on pooled features and
/// scores each sample by its neighbours' mean dynamic score. No parameters;
/// the output carries no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReference {
    pub k: usize,
    pub max_iters: usize,
}

impl ClusterReference {
    /// `dynamic_scores` holds `(y1 + y2) / 2` per sample.
    pub fn forward(&self, g: &mut Graph, input: &PathInput, dynamic_scores: Var) -> Result<PathOutput> {
        let t = g.mean(input.text, 1)?;
        let i = g.mean(input.image, 1)?;
        let pooled = g.concat(&[t, i], 1)?;
        let pooled = g.value(pooled).clone();
        let b = pooled.shape()[0];
        let points: Vec<Vec<f64>> = (0..b).map(|r| pooled.row(r).to_vec()).collect();
        let scores = g.value(dynamic_scores).data().to_vec();
        let clusters = kmeans(&points, self.k, self.max_iters)?;
        let z = leave_one_out_means(&clusters.assignment, &scores);
        let y = g.constant(Tensor::vector(&z));
        let zv = g.reshape(y, &[b, 1])?;
        Ok(PathOutput { z: zv, y })
    }
}

/// The fixed-structure third path.
#[derive(Clone, Debug, PartialEq)]
pub enum StaticPath {
    Siamese(SiamesePath),
    ClusterReference(ClusterReference),
}

impl StaticPath {
    pub fn new(store: &mut ParamStore, cfg: &PathConfig, dims: Dims, seed: u64) -> Result<Self> {
        Ok(match cfg.static_variant {
            StaticVariant::Siamese => StaticPath::Siamese(SiamesePath::new(store, cfg.hidden, dims, seed)?),
            StaticVariant::ClusterReference => StaticPath::ClusterReference(ClusterReference {
                k: cfg.cluster_k,
                max_iters: cfg.kmeans_iters,
            }),
        })
    }
}
