//! Samples, dataset splits and batching; synthetic generation, the
//! one-modality corruption protocol and feature-file IO live in submodules.

mod jsonl;
mod musef;
mod synth;

pub use jsonl::{read_jsonl, write_jsonl};
pub use musef::{
    checksum, decode, encode, file_checksum, read_features, validate, write_features, FormatSummary, MAGIC,
    VERSION_1, VERSION_2,
};
pub use synth::{corrupt_partial, generate_synthetic, planted_score, PlantedDirections, MAX_RULE_THRESHOLD};

use crate::autograd::Tensor;
use crate::error::{MuseError, Result};
use crate::features::{FeatureMatrix, Modality, Presence};
use crate::paths::Dims;

/// One labelled sample. Label 1 is fake, 0 is real.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: FeatureMatrix,
    pub image: FeatureMatrix,
    pub label: u8,
    /// Unpadded row counts `(text, image)` when the source recorded them.
    pub valid_lengths: Option<(u32, u32)>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: FeatureMatrix, image: FeatureMatrix, label: u8) -> Result<Self> {
        let id = id.into();
        if label > 1 {
            return Err(MuseError::Data(format!("sample `{id}`: label {label} is not 0 or 1")));
        }
        if !text.is_present() && !image.is_present() {
            return Err(MuseError::Data(format!("sample `{id}` has neither text nor image")));
        }
        if text.modality() != Modality::Text || image.modality() != Modality::Image {
            return Err(MuseError::Data(format!("sample `{id}`: modality slots swapped")));
        }
        Ok(Sample {
            id,
            text,
            image,
            label,
            valid_lengths: None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.text.is_present() && self.image.is_present()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            k_t: self.text.rows(),
            d_t: self.text.cols(),
            k_v: self.image.rows(),
            d_v: self.image.cols(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
    pub provenance: Provenance,
    pub dims: Dims,
}

impl DatasetSplit {
    /// Checks sample dimensions against `dims` and id uniqueness.
    pub fn new(
        train: Vec<Sample>,
        valid: Vec<Sample>,
        test: Vec<Sample>,
        seed: u64,
        provenance: Provenance,
        dims: Dims,
    ) -> Result<Self> {
        let ds = DatasetSplit {
            train,
            valid,
            test,
            seed,
            provenance,
            dims,
        };
        let mut ids = std::collections::HashSet::new();
        for s in ds.all() {
            if s.dims() != dims {
                return Err(MuseError::Data(format!(
                    "sample `{}` has dims {:?}, dataset declares {:?}",
                    s.id,
                    s.dims(),
                    dims
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(MuseError::Data(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Train, valid and test samples in that order.
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut Sample> {
        self.train.iter_mut().chain(self.valid.iter_mut()).chain(self.test.iter_mut())
    }
}

/// Dense batch tensors. Absent modalities hold zeros and are never read.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub text: Tensor,
    pub image: Tensor,
    pub presence: Presence,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| MuseError::Data("empty batch".into()))?;
        let dims = first.dims();
        let b = samples.len();
        let mut text = Vec::with_capacity(b * dims.k_t * dims.d_t);
        let mut image = Vec::with_capacity(b * dims.k_v * dims.d_v);
        let mut presence = Presence {
            text: Vec::with_capacity(b),
            image: Vec::with_capacity(b),
        };
        for s in samples {
            if s.dims() != dims {
                return Err(MuseError::Data(format!("sample `{}` does not match batch dims", s.id)));
            }
            push_matrix(&mut text, &s.text);
            push_matrix(&mut image, &s.image);
            presence.text.push(s.text.is_present());
            presence.image.push(s.image.is_present());
        }
        Ok(Batch {
            text: Tensor::new(vec![b, dims.k_t, dims.d_t], text)?,
            image: Tensor::new(vec![b, dims.k_v, dims.d_v], image)?,
            presence,
            labels: samples.iter().map(|s| f64::from(s.label)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn push_matrix(out: &mut Vec<f64>, m: &FeatureMatrix) {
    if m.is_present() {
        out.extend_from_slice(m.values().data());
    } else {
        out.extend(std::iter::repeat_n(0.0, m.rows() * m.cols()));
    }
}
