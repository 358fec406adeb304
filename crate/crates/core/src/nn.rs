//! Small parameterised layers shared by paths and operators.

use crate::autograd::{uniform_init, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{MuseError, Result};

/// Fully connected layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Registers `{name}.weight` and `{name}.bias`, initialised
    /// uniform(-1/sqrt(in), 1/sqrt(in)) from the per-name stream.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let weight = store.add(
            wname.clone(),
            uniform_init(&[inputs, outputs], bound, seed, &wname),
            ParamGroup::Weights,
        )?;
        let bias = store.add(
            bname.clone(),
            uniform_init(&[outputs], bound, seed, &bname),
            ParamGroup::Weights,
        )?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Applies the layer over the last axis of a rank-1, rank-2 or rank-3 input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.inputs) {
            return Err(MuseError::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.inputs, self.outputs],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.inputs])? };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(flat, w)?;
        let bb = g.broadcast(b, 0, rows)?;
        let y = g.add(y, bb)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.outputs;
        if out_shape.len() == 2 {
            Ok(y)
        } else {
            g.reshape(y, &out_shape)
        }
    }
}

/// Evaluates a linear layer on plain values, outside any graph.
pub fn linear_values(store: &ParamStore, layer: &Linear, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = layer.forward(&mut g, store, v)?;
    Ok(g.value(y).clone())
}
