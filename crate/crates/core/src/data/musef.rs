//! MUSEF binary feature files.
//!
//! All integers little-endian.
//!
//! ```text
//! header   magic "MUSEF\0" | version u16 | n_train n_valid n_test u32
//!          | K_T D_T K_V D_V u32
//! sample   id_len u32 | id (UTF-8) | label u8 | presence u8
//!          | [text_len u32 | image_len u32]   (version 2, presence bit 2)
//!          | text  K_T*D_T f32 row-major      (presence bit 0)
//!          | image K_V*D_V f32 row-major      (presence bit 1)
//! ```
//!
//! Samples appear as train, then valid, then test. Version 2 adds the
//! optional unpadded row counts; version 1 files never set bit 2.

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{MuseError, Result};
use crate::features::{FeatureMatrix, Modality};
use crate::paths::Dims;

use super::{DatasetSplit, Provenance, Sample};

pub const MAGIC: &[u8; 6] = b"MUSEF\0";
pub const VERSION_1: u16 = 1;
pub const VERSION_2: u16 = 2;

const TEXT_BIT: u8 = 0x01;
const IMAGE_BIT: u8 = 0x02;
const LENGTHS_BIT: u8 = 0x04;

/// What [`validate`] learned about a well-formed file.
#[derive(Clone, Debug, PartialEq)]
pub struct FormatSummary {
    pub version: u16,
    pub counts: [usize; 3],
    pub dims: Dims,
    pub text_absent: usize,
    pub image_absent: usize,
    pub checksum: String,
}

/// Serialises `ds`. Version 2 is used only when some sample carries
/// unpadded lengths. Values are written as `f32`.
pub fn encode(ds: &DatasetSplit) -> Vec<u8> {
    let v2 = ds.all().any(|s| s.valid_lengths.is_some());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(if v2 { VERSION_2 } else { VERSION_1 }).to_le_bytes());
    let d = ds.dims;
    for x in [ds.train.len(), ds.valid.len(), ds.test.len(), d.k_t, d.d_t, d.k_v, d.d_v] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for s in ds.all() {
        out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.push(s.label);
        let mut flags = 0u8;
        if s.text.is_present() {
            flags |= TEXT_BIT;
        }
        if s.image.is_present() {
            flags |= IMAGE_BIT;
        }
        if s.valid_lengths.is_some() {
            flags |= LENGTHS_BIT;
        }
        out.push(flags);
        if let Some((t, i)) = s.valid_lengths {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&i.to_le_bytes());
        }
        for m in [&s.text, &s.image] {
            if m.is_present() {
                for &x in m.values().data() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, message: String) -> MuseError {
        MuseError::Parse {
            offset: at as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.err(
                self.pos,
                format!(
                    "truncated {what}: expected {n} bytes, found {remaining} (file length {})",
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
        let start = self.pos;
        let raw = self.take(rows * cols * 4, what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for (k, c) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !x.is_finite() {
                return Err(self.err(start + 4 * k, format!("non-finite value in {what}")));
            }
            data.push(f64::from(x));
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// Parses a MUSEF byte buffer, checking every structural rule.
pub fn decode(bytes: &[u8]) -> Result<(DatasetSplit, u16)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(c.err(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u16("version")?;
    if version != VERSION_1 && version != VERSION_2 {
        return Err(c.err(6, format!("unsupported version {version}")));
    }
    let mut header = [0usize; 7];
    for (i, h) in header.iter_mut().enumerate() {
        *h = c.u32(["n_train", "n_valid", "n_test", "K_T", "D_T", "K_V", "D_V"][i])? as usize;
    }
    let [n_train, n_valid, n_test, k_t, d_t, k_v, d_v] = header;
    if header[3..].contains(&0) {
        return Err(c.err(16, "zero dimension in header".into()));
    }
    let dims = Dims { k_t, d_t, k_v, d_v };
    let allowed = if version == VERSION_2 {
        TEXT_BIT | IMAGE_BIT | LENGTHS_BIT
    } else {
        TEXT_BIT | IMAGE_BIT
    };
    let total = n_train + n_valid + n_test;
    let mut samples = Vec::with_capacity(total.min(1 << 20));
    let mut ids = HashSet::new();
    for n in 0..total {
        let at = c.pos;
        let len = c.u32("id length")? as usize;
        let id_bytes = c.take(len, "id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| c.err(at + 4, format!("sample {n}: id is not UTF-8")))?
            .to_string();
        if !ids.insert(id.clone()) {
            return Err(c.err(at, format!("duplicate id `{id}`")));
        }
        let label_at = c.pos;
        let label = c.u8("label")?;
        if label > 1 {
            return Err(c.err(label_at, format!("sample `{id}`: label {label} is not 0 or 1")));
        }
        let flags_at = c.pos;
        let flags = c.u8("presence")?;
        if flags & !allowed != 0 {
            return Err(c.err(flags_at, format!("sample `{id}`: unknown presence bits {flags:#04x}")));
        }
        if flags & (TEXT_BIT | IMAGE_BIT) == 0 {
            return Err(c.err(flags_at, format!("sample `{id}` has neither text nor image")));
        }
        let lengths = if flags & LENGTHS_BIT != 0 {
            let at = c.pos;
            let t = c.u32("text length")?;
            let i = c.u32("image length")?;
            if t as usize > k_t || i as usize > k_v {
                return Err(c.err(at, format!("sample `{id}`: valid lengths ({t}, {i}) exceed ({k_t}, {k_v})")));
            }
            Some((t, i))
        } else {
            None
        };
        let text = if flags & TEXT_BIT != 0 {
            FeatureMatrix::present(Modality::Text, c.matrix(k_t, d_t, "text matrix")?)?
        } else {
            FeatureMatrix::absent(Modality::Text, k_t, d_t)?
        };
        let image = if flags & IMAGE_BIT != 0 {
            FeatureMatrix::present(Modality::Image, c.matrix(k_v, d_v, "image matrix")?)?
        } else {
            FeatureMatrix::absent(Modality::Image, k_v, d_v)?
        };
        let mut s = Sample::new(id, text, image, label)?;
        s.valid_lengths = lengths;
        samples.push(s);
    }
    if c.pos != bytes.len() {
        return Err(c.err(c.pos, format!("{} trailing bytes after last sample", bytes.len() - c.pos)));
    }
    let test = samples.split_off(n_train + n_valid);
    let valid = samples.split_off(n_train);
    Ok((
        DatasetSplit::new(samples, valid, test, 0, Provenance::File, dims)?,
        version,
    ))
}

pub fn read_features(path: &Path) -> Result<DatasetSplit> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?.0)
}

pub fn write_features(ds: &DatasetSplit, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical encoding of `ds`.
pub fn checksum(ds: &DatasetSplit) -> String {
    sha256_hex(&encode(ds))
}

/// SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Format checker: parses the file and reports its shape and checksum.
pub fn validate(path: &Path) -> Result<FormatSummary> {
    let bytes = std::fs::read(path)?;
    let (ds, version) = decode(&bytes)?;
    Ok(FormatSummary {
        version,
        counts: [ds.train.len(), ds.valid.len(), ds.test.len()],
        dims: ds.dims,
        text_absent: ds.all().filter(|s| !s.text.is_present()).count(),
        image_absent: ds.all().filter(|s| !s.image.is_present()).count(),
        checksum: sha256_hex(&bytes),
    })
}
