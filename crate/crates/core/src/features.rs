//! Cross-modal global-local guidance and the missing-modality substitution.
//!
//! A present modality with a present partner is enhanced as
//! `(1 + norm(local ⊙ FC(other_global))) ⊙ local`, where `norm` is per-row L2
//! normalisation with `norm(0) = 0`. When the partner is absent the raw local
//! matrix passes through; an absent modality contributes an all-zero matrix.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::error::{MuseError, Result};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// A `K x D` feature matrix for one modality of one sample.
///
/// Reads of the values go through [`FeatureMatrix::values`], which counts
/// accesses so callers can verify absent modalities are never touched.
#[derive(Debug)]
pub struct FeatureMatrix {
    modality: Modality,
    values: Tensor,
    present: bool,
    reads: Cell<usize>,
}

impl Clone for FeatureMatrix {
    fn clone(&self) -> Self {
        FeatureMatrix {
            modality: self.modality,
            values: self.values.clone(),
            present: self.present,
            reads: Cell::new(0),
        }
    }
}

impl PartialEq for FeatureMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality && self.present == other.present && self.values == other.values
    }
}

impl FeatureMatrix {
    pub fn present(modality: Modality, values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(MuseError::Data(format!(
                "{} features must be a K x D matrix, got shape {:?}",
                modality.as_str(),
                values.shape()
            )));
        }
        Ok(FeatureMatrix {
            modality,
            values,
            present: true,
            reads: Cell::new(0),
        })
    }

    /// Zero placeholder for a missing modality.
    pub fn absent(modality: Modality, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MuseError::Data("feature matrices need K >= 1 and D >= 1".into()));
        }
        Ok(FeatureMatrix {
            modality,
            values: Tensor::zeros(&[rows, cols]),
            present: false,
            reads: Cell::new(0),
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn is_present(&self) -> bool {
        self.present
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        self.reads.set(self.reads.get() + 1);
        &self.values
    }

    pub fn read_count(&self) -> usize {
        self.reads.get()
    }

    /// Drops the modality, replacing the values with the zero placeholder.
    pub fn into_absent(self) -> Self {
        FeatureMatrix {
            modality: self.modality,
            values: Tensor::zeros(self.values.shape()),
            present: false,
            reads: Cell::new(0),
        }
    }
}

/// Column-wise mean over rows of a present modality.
pub fn global_pool(f: &FeatureMatrix) -> Result<Tensor> {
    if !f.is_present() {
        return Err(MuseError::Contract(format!(
            "global_pool on absent {} modality",
            f.modality.as_str()
        )));
    }
    let mut g = Graph::new();
    let v = g.constant(f.values().clone());
    let m = g.mean(v, 0)?;
    Ok(g.value(m).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedPair {
    pub text_enhanced: Tensor,
    pub image_enhanced: Tensor,
}

/// The two guidance projections: `text_fc` maps the image global vector to
/// the text width, `image_fc` the text global vector to the image width.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub text_fc: Linear,
    pub image_fc: Linear,
}

impl Guidance {
    pub fn new(store: &mut ParamStore, prefix: &str, text_dim: usize, image_dim: usize, seed: u64) -> Result<Self> {
        Ok(Guidance {
            text_fc: Linear::new(store, &format!("{prefix}.text_fc"), image_dim, text_dim, seed)?,
            image_fc: Linear::new(store, &format!("{prefix}.image_fc"), text_dim, image_dim, seed)?,
        })
    }
}

/// Graph form of the enhancement for a batch: `local: [B,K,D]`,
/// `other_global: [B,D_other]`.
pub fn enhance_batch(g: &mut Graph, store: &ParamStore, local: Var, other_global: Var, fc: &Linear) -> Result<Var> {
    let shape = g.shape(local).to_vec();
    if shape.len() != 3 {
        return Err(MuseError::Shape {
            op: "enhance",
            lhs: shape,
            rhs: g.shape(other_global).to_vec(),
        });
    }
    let gate = fc.forward(g, store, other_global)?;
    if g.shape(gate) != [shape[0], shape[2]] {
        return Err(MuseError::Shape {
            op: "enhance",
            lhs: shape,
            rhs: g.shape(gate).to_vec(),
        });
    }
    let gate = g.broadcast(gate, 1, shape[1])?;
    let d = g.mul(local, gate)?;
    let n = g.l2_normalize(d, 2)?;
    let scaled = g.mul(n, local)?;
    g.add(local, scaled)
}

/// Per-sample presence masks for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Presence {
    pub text: Vec<bool>,
    pub image: Vec<bool>,
}

impl Presence {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

fn mask_to(g: &mut Graph, mask: &[f64], rows: usize, cols: usize) -> Result<Var> {
    let m = g.constant(Tensor::vector(mask));
    let m = g.broadcast(m, 1, rows)?;
    g.broadcast(m, 2, cols)
}

/// Batched missing-modality rule. `text: [B,K_T,D_T]`, `image: [B,K_V,D_V]`,
/// where absent entries already hold zero placeholders.
pub fn partial_rule_batch(
    g: &mut Graph,
    store: &ParamStore,
    guidance: &Guidance,
    text: Var,
    image: Var,
    presence: &Presence,
) -> Result<(Var, Var)> {
    if let Some(i) = (0..presence.len()).find(|&i| !presence.text[i] && !presence.image[i]) {
        return Err(MuseError::Data(format!("sample {i} in batch has no modality")));
    }
    let ts = g.shape(text).to_vec();
    let is = g.shape(image).to_vec();
    let text_global = g.mean(text, 1)?;
    let image_global = g.mean(image, 1)?;
    let text_enh = enhance_batch(g, store, text, image_global, &guidance.text_fc)?;
    let image_enh = enhance_batch(g, store, image, text_global, &guidance.image_fc)?;

    let both: Vec<f64> = (0..presence.len())
        .map(|i| f64::from(u8::from(presence.text[i] && presence.image[i])))
        .collect();
    let text_only: Vec<f64> = (0..presence.len())
        .map(|i| f64::from(u8::from(presence.text[i] && !presence.image[i])))
        .collect();
    let image_only: Vec<f64> = (0..presence.len())
        .map(|i| f64::from(u8::from(!presence.text[i] && presence.image[i])))
        .collect();

    let select = |g: &mut Graph, enh: Var, raw: Var, shape: &[usize], raw_mask: &[f64]| -> Result<Var> {
        let mb = mask_to(g, &both, shape[1], shape[2])?;
        let mr = mask_to(g, raw_mask, shape[1], shape[2])?;
        let a = g.mul(mb, enh)?;
        let b = g.mul(mr, raw)?;
        g.add(a, b)
    };
    let t = select(g, text_enh, text, &ts, &text_only)?;
    let i = select(g, image_enh, image, &is, &image_only)?;
    Ok((t, i))
}

/// Single-sample enhancement of `local` guided by `other_global`.
pub fn enhance(store: &ParamStore, local: &FeatureMatrix, other_global: &Tensor, fc: &Linear) -> Result<Tensor> {
    if !local.is_present() {
        return Err(MuseError::Contract(format!(
            "enhance on absent {} modality",
            local.modality.as_str()
        )));
    }
    let v = local.values();
    let mut g = Graph::new();
    let l = g.constant(v.reshape(&[1, v.shape()[0], v.shape()[1]])?);
    let o = g.constant(other_global.reshape(&[1, other_global.len()])?);
    let e = enhance_batch(&mut g, store, l, o, fc)?;
    g.value(e).reshape(v.shape())
}

/// Applies the missing-modality rule to one sample without reading the
/// values of an absent modality.
pub fn apply_partial_rule(
    store: &ParamStore,
    text: &FeatureMatrix,
    image: &FeatureMatrix,
    guidance: &Guidance,
) -> Result<EnhancedPair> {
    match (text.is_present(), image.is_present()) {
        (false, false) => Err(MuseError::Data("sample has neither text nor image".into())),
        (false, true) => Ok(EnhancedPair {
            text_enhanced: Tensor::zeros(&[text.rows(), text.cols()]),
            image_enhanced: image.values().clone(),
        }),
        (true, false) => Ok(EnhancedPair {
            text_enhanced: text.values().clone(),
            image_enhanced: Tensor::zeros(&[image.rows(), image.cols()]),
        }),
        (true, true) => {
            let tg = global_pool(text)?;
            let ig = global_pool(image)?;
            Ok(EnhancedPair {
                text_enhanced: enhance(store, text, &ig, &guidance.text_fc)?,
                image_enhanced: enhance(store, image, &tg, &guidance.image_fc)?,
            })
        }
    }
}
