//! Client batch files (`data/client-<i>/{train,test}`).
//!
//! Layout, integers big-endian:
//!
//! ```text
//! "FHB1" | u8 encoding (1 = binary64 features, 2 = u8 pixels / 255)
//! u16 name length | dataset name | u32 num_classes | u32 feature_dim | u32 count
//! count x ( u64 pooled index | u32 label | feature_dim features )
//! ```

use std::fs;
use std::path::Path;

use crate::data::{Dataset, DatasetName, Features};
use crate::error::{Error, IoContext, Result};

pub const BATCH_MAGIC: &[u8; 4] = b"FHB1";
const ENC_F64: u8 = 1;
const ENC_PIXELS: u8 = 2;

/// Writes the selected samples of `dataset`, tagged with their pooled indices.
pub fn write_batch(path: &Path, dataset: &Dataset, indices: &[usize]) -> Result<()> {
    let sub = dataset.subset(indices)?;
    let dim = crate::data::Batch::feature_dim(&sub);
    let name = dataset.name().as_str();
    let mut out = Vec::new();
    out.extend_from_slice(BATCH_MAGIC);
    out.push(match sub.store() {
        Features::Pixels(_) => ENC_PIXELS,
        Features::Dense(_) => ENC_F64,
    });
    out.extend_from_slice(&(name.len() as u16).to_be_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dataset.num_classes() as u32).to_be_bytes());
    out.extend_from_slice(&(dim as u32).to_be_bytes());
    out.extend_from_slice(&(indices.len() as u32).to_be_bytes());
    for (row, (index, label)) in indices.iter().zip(sub.labels()).enumerate() {
        out.extend_from_slice(&(*index as u64).to_be_bytes());
        out.extend_from_slice(&label.to_be_bytes());
        match sub.store() {
            Features::Pixels(b) => out.extend_from_slice(&b[row * dim..(row + 1) * dim]),
            Features::Dense(v) => {
                for x in &v[row * dim..(row + 1) * dim] {
                    out.extend_from_slice(&x.to_be_bytes());
                }
            }
        }
    }
    fs::write(path, out).at(path)
}

/// Returns the pooled indices and the samples.
pub fn read_batch(path: &Path) -> Result<(Vec<usize>, Dataset)> {
    let bytes = fs::read(path).at(path)?;
    let truncated = |what: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: what.to_string(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| truncated("magic"))? != BATCH_MAGIC {
        return Err(Error::Decode(format!("{}: not a batch file", path.display())));
    }
    let enc = cur.take(1).ok_or_else(|| truncated("encoding"))?[0];
    let name_len = u16::from_be_bytes(cur.array().ok_or_else(|| truncated("name"))?) as usize;
    let name: DatasetName = std::str::from_utf8(cur.take(name_len).ok_or_else(|| truncated("name"))?)
        .map_err(|e| Error::Decode(e.to_string()))?
        .parse()?;
    let num_classes = u32::from_be_bytes(cur.array().ok_or_else(|| truncated("header"))?) as usize;
    let dim = u32::from_be_bytes(cur.array().ok_or_else(|| truncated("header"))?) as usize;
    let count = u32::from_be_bytes(cur.array().ok_or_else(|| truncated("header"))?) as usize;

    let mut indices = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let features = match enc {
        ENC_PIXELS => {
            let mut px = Vec::with_capacity(count * dim);
            for _ in 0..count {
                indices.push(u64::from_be_bytes(cur.array().ok_or_else(|| truncated("record"))?) as usize);
                labels.push(u32::from_be_bytes(cur.array().ok_or_else(|| truncated("record"))?));
                px.extend_from_slice(cur.take(dim).ok_or_else(|| truncated("record"))?);
            }
            Features::Pixels(px)
        }
        ENC_F64 => {
            let mut v = Vec::with_capacity(count * dim);
            for _ in 0..count {
                indices.push(u64::from_be_bytes(cur.array().ok_or_else(|| truncated("record"))?) as usize);
                labels.push(u32::from_be_bytes(cur.array().ok_or_else(|| truncated("record"))?));
                for _ in 0..dim {
                    v.push(f64::from_be_bytes(cur.array().ok_or_else(|| truncated("record"))?));
                }
            }
            Features::Dense(v)
        }
        other => return Err(Error::Decode(format!("{}: unknown encoding {other}", path.display()))),
    };
    if cur.pos != bytes.len() {
        return Err(Error::Decode(format!("{}: trailing bytes", path.display())));
    }
    Ok((indices, Dataset::new(name, num_classes, dim, features, labels)?))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().unwrap())
    }
}
