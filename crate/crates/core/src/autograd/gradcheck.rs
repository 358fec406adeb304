//! Central finite-difference checks for graph-built scalar functions.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Relative error with an absolute floor so near-zero gradients are judged
/// on absolute difference.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `f` (which must return a scalar node) against central differences
/// with step `eps` on every input element.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = t.data().to_vec();
            let mut minus = t.data().to_vec();
            plus[j] += eps;
            minus[j] -= eps;
            work[i] = Tensor::from_parts(t.shape().to_vec(), plus);
            let fp = eval(&work)?;
            work[i] = Tensor::from_parts(t.shape().to_vec(), minus);
            let fm = eval(&work)?;
            work[i] = t.clone();
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
