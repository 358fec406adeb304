//! JSON-lines debug format, one sample per line:
//!
//! ```json
//! {"id":"a","split":"train","label":1,"text":[[0.1,0.2]],"image":null}
//! ```
//!
//! `null` marks an absent modality. Matrix shapes are taken from the first
//! present matrix of each modality; `valid_lengths` is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{MuseError, Result};
use crate::features::{FeatureMatrix, Modality};
use crate::paths::Dims;

use super::{DatasetSplit, Provenance, Sample};

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    split: String,
    label: u8,
    text: Option<Vec<Vec<f64>>>,
    image: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    valid_lengths: Option<(u32, u32)>,
}

fn rows(m: &FeatureMatrix) -> Option<Vec<Vec<f64>>> {
    m.is_present().then(|| {
        let v = m.values();
        (0..v.shape()[0]).map(|r| v.row(r).to_vec()).collect()
    })
}

pub fn write_jsonl(ds: &DatasetSplit, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (split, samples) in [("train", &ds.train), ("valid", &ds.valid), ("test", &ds.test)] {
        for s in samples {
            let line = Line {
                id: s.id.clone(),
                split: split.into(),
                label: s.label,
                text: rows(&s.text),
                image: rows(&s.image),
                valid_lengths: s.valid_lengths,
            };
            out.push_str(&serde_json::to_string(&line).map_err(|e| MuseError::Data(e.to_string()))?);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = Vec::new();
    let mut offset = 0u64;
    for raw in text.split_inclusive('\n') {
        let trimmed = raw.trim();
        if !trimmed.is_empty() {
            let line: Line = serde_json::from_str(trimmed).map_err(|e| MuseError::Parse {
                offset,
                message: format!("line {}: {e}", lines.len() + 1),
            })?;
            lines.push((offset, line));
        }
        offset += raw.len() as u64;
    }
    let shape_of = |get: fn(&Line) -> &Option<Vec<Vec<f64>>>, name: &str| -> Result<(usize, usize)> {
        lines
            .iter()
            .find_map(|(_, l)| get(l).as_ref().map(|m| (m.len(), m.first().map_or(0, Vec::len))))
            .ok_or_else(|| MuseError::Data(format!("no sample has a {name} matrix; its shape is unknown")))
    };
    let (k_t, d_t) = shape_of(|l| &l.text, "text")?;
    let (k_v, d_v) = shape_of(|l| &l.image, "image")?;
    let dims = Dims { k_t, d_t, k_v, d_v };

    let matrix = |m: &Option<Vec<Vec<f64>>>, modality: Modality, k: usize, d: usize, at: u64| -> Result<FeatureMatrix> {
        match m {
            None => FeatureMatrix::absent(modality, k, d),
            Some(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != d) {
                    return Err(MuseError::Parse {
                        offset: at,
                        message: format!("{} matrix is not {k}x{d}", modality.as_str()),
                    });
                }
                FeatureMatrix::present(modality, Tensor::matrix(rows)?)
            }
        }
    };
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (at, l) in &lines {
        let text = matrix(&l.text, Modality::Text, k_t, d_t, *at)?;
        let image = matrix(&l.image, Modality::Image, k_v, d_v, *at)?;
        let mut s = Sample::new(l.id.clone(), text, image, l.label)?;
        s.valid_lengths = l.valid_lengths;
        match l.split.as_str() {
            "train" => train.push(s),
            "valid" => valid.push(s),
            "test" => test.push(s),
            other => {
                return Err(MuseError::Parse {
                    offset: *at,
                    message: format!("unknown split `{other}`"),
                })
            }
        }
    }
    DatasetSplit::new(train, valid, test, 0, Provenance::File, dims)
}
