//! Candidate operator registries for fusion and transformation cells.
//!
//! Four kinds of cell draw from four registries:
//!
//! | kind              | operators                                          |
//! |-------------------|----------------------------------------------------|
//! | `Fusion`          | Sum, Max, Average, Concat (vector pair -> vector)  |
//! | `SeqFusion`       | Concat along the sequence axis                     |
//! | `LinearTransform` | Sigmoid, ReLU, Tanh, GELU, Softsign, Skip, MLP     |
//! | `SeqTransform`    | Transformer, RNN, LSTM, GRU, Skip                  |
//!
//! Vector operators act on `[B, D]` batches, sequence operators on
//! `[B, L, D]`. Every operator maps to width `D`, so a mixed edge can sum
//! candidate outputs.

use crate::autograd::{uniform_init, Graph, ParamGroup, ParamId, ParamStore, Tensor, Unary, Var};
use crate::error::{MuseError, Result};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Fusion,
    SeqFusion,
    LinearTransform,
    SeqTransform,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Fusion => "fusion",
            OpKind::SeqFusion => "seq_fusion",
            OpKind::LinearTransform => "linear_transform",
            OpKind::SeqTransform => "seq_transform",
        }
    }

    /// Operator names in registry order. The order fixes operator indices
    /// and therefore argmax tie-breaking.
    pub fn registry(self) -> &'static [&'static str] {
        match self {
            OpKind::Fusion => &["Sum", "Max", "Average", "Concat"],
            OpKind::SeqFusion => &["Concat"],
            OpKind::LinearTransform => &["Sigmoid", "ReLU", "Tanh", "GELU", "Softsign", "Skip", "MLP"],
            OpKind::SeqTransform => &["Transformer", "RNN", "LSTM", "GRU", "Skip"],
        }
    }

    pub fn takes_pair(self) -> bool {
        matches!(self, OpKind::Fusion | OpKind::SeqFusion)
    }

    /// Resolves a name to its registry spelling, case-insensitively.
    pub fn lookup(self, name: &str) -> Result<&'static str> {
        self.registry()
            .iter()
            .copied()
            .find(|n| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| MuseError::Registry {
                kind: self.as_str(),
                name: name.to_string(),
            })
    }
}

/// Static description of a candidate operator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatorSpec {
    pub name: &'static str,
    pub kind: OpKind,
    pub param_shapes: Vec<Vec<usize>>,
}

fn recurrent_shapes(width: usize, gates: usize) -> Vec<Vec<usize>> {
    let mut v = Vec::new();
    for _ in 0..gates {
        v.push(vec![width, width]);
        v.push(vec![width, width]);
        v.push(vec![width]);
    }
    v
}

/// Parameter shapes of operator `name` at hidden width `width`.
pub fn operator_spec(kind: OpKind, name: &str, width: usize) -> Result<OperatorSpec> {
    let name = kind.lookup(name)?;
    let d = width;
    let param_shapes = match (kind, name) {
        (OpKind::Fusion, "Concat") => vec![vec![2 * d, d], vec![d]],
        (OpKind::LinearTransform, "MLP") => vec![vec![d, d], vec![d], vec![d, d], vec![d]],
        (OpKind::SeqTransform, "RNN") => recurrent_shapes(d, 1),
        (OpKind::SeqTransform, "GRU") => {
            // reset-gated candidate carries a second bias on the hidden term
            let mut v = recurrent_shapes(d, 3);
            v.push(vec![d]);
            v
        }
        (OpKind::SeqTransform, "LSTM") => recurrent_shapes(d, 4),
        (OpKind::SeqTransform, "Transformer") => {
            let mut v = Vec::new();
            for _ in 0..4 {
                v.push(vec![d, d]);
                v.push(vec![d]);
            }
            v.extend([vec![d], vec![d]]);
            v.extend([vec![d, 2 * d], vec![2 * d], vec![2 * d, d], vec![d]]);
            v.extend([vec![d], vec![d]]);
            v
        }
        _ => Vec::new(),
    };
    Ok(OperatorSpec {
        name,
        kind,
        param_shapes,
    })
}

/// Weights of one recurrent gate: `x W + h U + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
}

impl Gate {
    fn new(store: &mut ParamStore, prefix: &str, width: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let mut add = |suffix: &str, shape: &[usize]| {
            let name = format!("{prefix}.{suffix}");
            let t = uniform_init(shape, bound, seed, &name);
            store.add(name, t, ParamGroup::Weights)
        };
        Ok(Gate {
            input: add("w_in", &[width, width])?,
            hidden: add("w_hid", &[width, width])?,
            bias: add("b", &[width])?,
        })
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.input, self.hidden, self.bias]
    }

    /// Pre-activation `x W + h U + b` for `x, h: [B, D]`.
    fn pre(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let w = g.param(store, self.input);
        let u = g.param(store, self.hidden);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        let bb = g.broadcast(b, 0, rows)?;
        g.add(s, bb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[width]), ParamGroup::Weights)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[width]), ParamGroup::Weights)?,
        })
    }

    /// Normalises over the last axis of `[B, L, D]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let last = shape.len() - 1;
        let d = shape[last];
        let mean = g.mean(x, last)?;
        let mean = g.broadcast(mean, last, d)?;
        let centered = g.sub(x, mean)?;
        let sq = g.unary(centered, Unary::Square);
        let var = g.mean(sq, last)?;
        let var = g.add_scalar(var, LAYER_NORM_EPS);
        let inv = g.unary(var, Unary::Sqrt);
        let inv = g.unary(inv, Unary::Recip);
        let inv = g.broadcast(inv, last, d)?;
        let normed = g.mul(centered, inv)?;
        let gain = g.param(store, self.gain);
        let gain = g.expand_leading(gain, &shape)?;
        let bias = g.param(store, self.bias);
        let bias = g.expand_leading(bias, &shape)?;
        let y = g.mul(normed, gain)?;
        g.add(y, bias)
    }
}

/// Single-head encoder block: attention and a `D -> 2D -> D` feed-forward,
/// each wrapped in residual + layer normalisation (post-norm).
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for l in [&self.query, &self.key, &self.value, &self.out] {
            v.extend(l.params());
        }
        v.extend([self.norm1.gain, self.norm1.bias]);
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v.extend([self.norm2.gain, self.norm2.bias]);
        v
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let d = g.shape(x)[2];
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let kt = g.transpose(k)?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.batch_matmul(attn, v)?;
        let ctx = self.out.forward(g, store, ctx)?;
        let r1 = g.add(x, ctx)?;
        let h1 = self.norm1.forward(g, store, r1)?;
        let f = self.ff1.forward(g, store, h1)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f)?;
        let r2 = g.add(h1, f)?;
        self.norm2.forward(g, store, r2)
    }
}

/// An instantiated candidate operator together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Sum,
    Max,
    Average,
    /// `[a; b]` followed by a `2D -> D` projection.
    Concat(Linear),
    /// Concatenation along the sequence axis.
    SeqConcat,
    Activation(&'static str, Unary),
    Skip,
    /// `FC(Sigmoid(FC(x)))` with hidden width `D`.
    Mlp(Linear, Linear),
    Rnn(Gate),
    Lstm {
        input: Gate,
        forget: Gate,
        cell: Gate,
        output: Gate,
    },
    Gru {
        update: Gate,
        reset: Gate,
        candidate: Gate,
        candidate_hidden_bias: ParamId,
    },
    Transformer(Box<TransformerBlock>),
}

/// Input to a cell: the modality pair for fusion cells, a single
/// representation otherwise.
#[derive(Clone, Copy, Debug)]
pub enum CellInput {
    Pair(Var, Var),
    Single(Var),
}

impl Operator {
    /// Creates operator `name` of `kind` with parameters under `prefix`.
    /// Parameters draw from per-name streams, so the same seed always yields
    /// the same initial values.
    pub fn instantiate(
        kind: OpKind,
        name: &str,
        width: usize,
        store: &mut ParamStore,
        prefix: &str,
        seed: u64,
    ) -> Result<Operator> {
        let name = kind.lookup(name)?;
        let p = format!("{prefix}.{name}");
        let op = match (kind, name) {
            (OpKind::Fusion, "Sum") => Operator::Sum,
            (OpKind::Fusion, "Max") => Operator::Max,
            (OpKind::Fusion, "Average") => Operator::Average,
            (OpKind::Fusion, "Concat") => Operator::Concat(Linear::new(store, &format!("{p}.proj"), 2 * width, width, seed)?),
            (OpKind::SeqFusion, "Concat") => Operator::SeqConcat,
            (OpKind::LinearTransform, "Sigmoid") => Operator::Activation("Sigmoid", Unary::Sigmoid),
            (OpKind::LinearTransform, "ReLU") => Operator::Activation("ReLU", Unary::Relu),
            (OpKind::LinearTransform, "Tanh") => Operator::Activation("Tanh", Unary::Tanh),
            (OpKind::LinearTransform, "GELU") => Operator::Activation("GELU", Unary::Gelu),
            (OpKind::LinearTransform, "Softsign") => Operator::Activation("Softsign", Unary::Softsign),
            (OpKind::LinearTransform | OpKind::SeqTransform, "Skip") => Operator::Skip,
            (OpKind::LinearTransform, "MLP") => Operator::Mlp(
                Linear::new(store, &format!("{p}.fc1"), width, width, seed)?,
                Linear::new(store, &format!("{p}.fc2"), width, width, seed)?,
            ),
            (OpKind::SeqTransform, "RNN") => Operator::Rnn(Gate::new(store, &format!("{p}.h"), width, seed)?),
            (OpKind::SeqTransform, "LSTM") => Operator::Lstm {
                input: Gate::new(store, &format!("{p}.i"), width, seed)?,
                forget: Gate::new(store, &format!("{p}.f"), width, seed)?,
                cell: Gate::new(store, &format!("{p}.g"), width, seed)?,
                output: Gate::new(store, &format!("{p}.o"), width, seed)?,
            },
            (OpKind::SeqTransform, "GRU") => {
                let bname = format!("{p}.n.b_hid");
                let bound = 1.0 / (width as f64).sqrt();
                let t = uniform_init(&[width], bound, seed, &bname);
                Operator::Gru {
                    update: Gate::new(store, &format!("{p}.z"), width, seed)?,
                    reset: Gate::new(store, &format!("{p}.r"), width, seed)?,
                    candidate: Gate::new(store, &format!("{p}.n"), width, seed)?,
                    candidate_hidden_bias: store.add(bname, t, ParamGroup::Weights)?,
                }
            }
            (OpKind::SeqTransform, "Transformer") => Operator::Transformer(Box::new(TransformerBlock {
                query: Linear::new(store, &format!("{p}.q"), width, width, seed)?,
                key: Linear::new(store, &format!("{p}.k"), width, width, seed)?,
                value: Linear::new(store, &format!("{p}.v"), width, width, seed)?,
                out: Linear::new(store, &format!("{p}.o"), width, width, seed)?,
                norm1: LayerNorm::new(store, &format!("{p}.ln1"), width)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), width, 2 * width, seed)?,
                ff2: Linear::new(store, &format!("{p}.ff2"), 2 * width, width, seed)?,
                norm2: LayerNorm::new(store, &format!("{p}.ln2"), width)?,
            })),
            _ => unreachable!("lookup guarantees a registered name"),
        };
        Ok(op)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Operator::Sum => "Sum",
            Operator::Max => "Max",
            Operator::Average => "Average",
            Operator::Concat(_) | Operator::SeqConcat => "Concat",
            Operator::Activation(n, _) => n,
            Operator::Skip => "Skip",
            Operator::Mlp(..) => "MLP",
            Operator::Rnn(_) => "RNN",
            Operator::Lstm { .. } => "LSTM",
            Operator::Gru { .. } => "GRU",
            Operator::Transformer(_) => "Transformer",
        }
    }

    /// Parameters owned by this operator, in declaration order.
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Operator::Concat(l) => l.params(),
            Operator::Mlp(a, b) => [a.params(), b.params()].concat(),
            Operator::Rnn(h) => h.params(),
            Operator::Lstm {
                input,
                forget,
                cell,
                output,
            } => [input.params(), forget.params(), cell.params(), output.params()].concat(),
            Operator::Gru {
                update,
                reset,
                candidate,
                candidate_hidden_bias,
            } => {
                let mut v = [update.params(), reset.params(), candidate.params()].concat();
                v.push(*candidate_hidden_bias);
                v
            }
            Operator::Transformer(t) => t.params(),
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: CellInput) -> Result<Var> {
        match (self, input) {
            (Operator::Sum, CellInput::Pair(a, b)) => g.add(a, b),
            (Operator::Max, CellInput::Pair(a, b)) => g.maximum(a, b),
            (Operator::Average, CellInput::Pair(a, b)) => {
                let s = g.add(a, b)?;
                Ok(g.scale(s, 0.5))
            }
            (Operator::Concat(proj), CellInput::Pair(a, b)) => {
                if g.shape(a) != g.shape(b) {
                    return Err(MuseError::Shape {
                        op: "fusion Concat",
                        lhs: g.shape(a).to_vec(),
                        rhs: g.shape(b).to_vec(),
                    });
                }
                let axis = g.shape(a).len() - 1;
                let c = g.concat(&[a, b], axis)?;
                proj.forward(g, store, c)
            }
            (Operator::SeqConcat, CellInput::Pair(a, b)) => g.concat(&[a, b], 1),
            (Operator::Activation(_, f), CellInput::Single(x)) => Ok(g.unary(x, *f)),
            (Operator::Skip, CellInput::Single(x)) => Ok(x),
            (Operator::Mlp(fc1, fc2), CellInput::Single(x)) => {
                let h = fc1.forward(g, store, x)?;
                let h = g.sigmoid(h);
                fc2.forward(g, store, h)
            }
            (Operator::Rnn(gate), CellInput::Single(x)) => recur(g, x, |g, xt, h, _| {
                let a = gate.pre(g, store, xt, h)?;
                Ok((g.tanh(a), None))
            }),
            (
                Operator::Lstm {
                    input,
                    forget,
                    cell,
                    output,
                },
                CellInput::Single(x),
            ) => recur(g, x, |g, xt, h, c| {
                let c = c.expect("lstm carries a cell state");
                let i = input.pre(g, store, xt, h)?;
                let i = g.sigmoid(i);
                let f = forget.pre(g, store, xt, h)?;
                let f = g.sigmoid(f);
                let cand = cell.pre(g, store, xt, h)?;
                let cand = g.tanh(cand);
                let o = output.pre(g, store, xt, h)?;
                let o = g.sigmoid(o);
                let fc = g.mul(f, c)?;
                let ic = g.mul(i, cand)?;
                let c_new = g.add(fc, ic)?;
                let tc = g.tanh(c_new);
                let h_new = g.mul(o, tc)?;
                Ok((h_new, Some(c_new)))
            }),
            (
                Operator::Gru {
                    update,
                    reset,
                    candidate,
                    candidate_hidden_bias,
                },
                CellInput::Single(x),
            ) => recur(g, x, |g, xt, h, _| {
                let rows = g.shape(xt)[0];
                let z = update.pre(g, store, xt, h)?;
                let z = g.sigmoid(z);
                let r = reset.pre(g, store, xt, h)?;
                let r = g.sigmoid(r);
                let w = g.param(store, candidate.input);
                let u = g.param(store, candidate.hidden);
                let b = g.param(store, candidate.bias);
                let bh = g.param(store, *candidate_hidden_bias);
                let xw = g.matmul(xt, w)?;
                let b = g.broadcast(b, 0, rows)?;
                let xw = g.add(xw, b)?;
                let hu = g.matmul(h, u)?;
                let bh = g.broadcast(bh, 0, rows)?;
                let hu = g.add(hu, bh)?;
                let rh = g.mul(r, hu)?;
                let n = g.add(xw, rh)?;
                let n = g.tanh(n);
                // h' = (1 - z) n + z h = n + z (h - n)
                let diff = g.sub(h, n)?;
                let zd = g.mul(z, diff)?;
                let h_new = g.add(n, zd)?;
                Ok((h_new, None))
            }),
            (Operator::Transformer(block), CellInput::Single(x)) => block.forward(g, store, x),
            (op, _) => Err(MuseError::Contract(format!(
                "operator {} received the wrong input arity",
                op.name()
            ))),
        }
    }
}

type StepOut = (Var, Option<Var>);

/// Unrolls a recurrence over `x: [B, L, D]` from zero initial state and
/// stacks the per-step hidden states back into `[B, L, D]`.
fn recur(
    g: &mut Graph,
    x: Var,
    mut step: impl FnMut(&mut Graph, Var, Var, Option<Var>) -> Result<StepOut>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(MuseError::Shape {
            op: "recurrence",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let mut h = g.constant(Tensor::zeros(&[b, d]));
    let mut c = Some(g.constant(Tensor::zeros(&[b, d])));
    let mut outs = Vec::with_capacity(l);
    for t in 0..l {
        let xt = g.select(x, 1, t)?;
        let (hn, cn) = step(g, xt, h, c)?;
        h = hn;
        if cn.is_some() {
            c = cn;
        }
        outs.push(g.reshape(h, &[b, 1, d])?);
    }
    g.concat(&outs, 1)
}
