//! Datasets for the three experiment families and the container they share.

mod adding;
mod mnist;
mod text;

pub use adding::{adding_csv, gen_adding, to_dataset as adding_dataset, AddingExample};
pub use mnist::{
    downsample_2x2, inverse_permutation, load_mnist_idx, make_permutation, pixels_to_sequence, read_idx_images,
    read_idx_labels, stratified_subset, write_idx_images, write_idx_labels, MnistImages, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use text::{
    build_vocab, gen_longrange_text, load_labeled_text, to_dataset as token_dataset, tokenize, TokenSequence, Vocab,
    PAD_ID, UNK_ID,
};

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{Batch, Inputs, Targets};

/// Input side of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Examples {
    /// Fixed-length real sequences, `n × steps × dim`.
    Dense { dim: usize, steps: usize, data: Vec<f64> },
    /// Variable-length token sequences.
    Tokens(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Examples,
    pub targets: Targets,
}

const DATA_MAGIC: &[u8; 8] = b"RRADATA1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the given examples into a batch, padding token sequences to
    /// the longest one selected.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let targets = match &self.targets {
            Targets::Regression(t) => Targets::Regression(indices.iter().map(|&i| t[i]).collect()),
            Targets::Classes(t) => Targets::Classes(indices.iter().map(|&i| t[i]).collect()),
        };
        match &self.examples {
            Examples::Dense { dim, steps, data } => {
                let stride = dim * steps;
                let mut out = Vec::with_capacity(indices.len() * stride);
                for &i in indices {
                    out.extend_from_slice(&data[i * stride..(i + 1) * stride]);
                }
                Batch::full(indices.len(), *steps, Inputs::Dense { dim: *dim, data: out }, targets)
            }
            Examples::Tokens(seqs) => {
                let steps = indices.iter().map(|&i| seqs[i].len()).max().unwrap_or(0);
                let mut ids = Vec::with_capacity(indices.len() * steps);
                let mut mask = Vec::with_capacity(indices.len() * steps);
                for &i in indices {
                    let s = &seqs[i];
                    ids.extend_from_slice(s);
                    ids.extend(std::iter::repeat(PAD_ID).take(steps - s.len()));
                    mask.extend((0..steps).map(|t| t < s.len()));
                }
                Batch::new(indices.len(), steps, Inputs::Tokens(ids), &mask, targets)
            }
        }
    }

    /// Length-prefixed little-endian container.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATA_MAGIC)?;
        match &self.examples {
            Examples::Dense { dim, steps, data } => {
                w.write_all(&[0u8])?;
                for v in [*dim as u64, *steps as u64, data.len() as u64] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Examples::Tokens(seqs) => {
                w.write_all(&[1u8])?;
                w.write_all(&(seqs.len() as u64).to_le_bytes())?;
                for s in seqs {
                    w.write_all(&(s.len() as u64).to_le_bytes())?;
                    for &id in s {
                        w.write_all(&(id as u64).to_le_bytes())?;
                    }
                }
            }
        }
        match &self.targets {
            Targets::Regression(t) => {
                w.write_all(&[0u8])?;
                w.write_all(&(t.len() as u64).to_le_bytes())?;
                for v in t {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Targets::Classes(t) => {
                w.write_all(&[1u8])?;
                w.write_all(&(t.len() as u64).to_le_bytes())?;
                for &v in t {
                    w.write_all(&(v as u64).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor { bytes: &bytes, at: 0 };
        if cur.take(8)? != DATA_MAGIC {
            return Err(Error::InvalidArgument("not a dataset file".into()));
        }
        let examples = match cur.take(1)?[0] {
            0 => {
                let dim = cur.u64()? as usize;
                let steps = cur.u64()? as usize;
                let n = cur.u64()? as usize;
                let data = (0..n).map(|_| cur.f64()).collect::<Result<_>>()?;
                Examples::Dense { dim, steps, data }
            }
            1 => {
                let n = cur.u64()? as usize;
                let mut seqs = Vec::with_capacity(n.min(1 << 20));
                for _ in 0..n {
                    let len = cur.u64()? as usize;
                    seqs.push((0..len).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<_>>()?);
                }
                Examples::Tokens(seqs)
            }
            k => return Err(Error::InvalidArgument(format!("unknown example kind {k}"))),
        };
        let targets = match cur.take(1)?[0] {
            0 => {
                let n = cur.u64()? as usize;
                Targets::Regression((0..n).map(|_| cur.f64()).collect::<Result<_>>()?)
            }
            1 => {
                let n = cur.u64()? as usize;
                Targets::Classes((0..n).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<_>>()?)
            }
            k => return Err(Error::InvalidArgument(format!("unknown target kind {k}"))),
        };
        Ok(Dataset { examples, targets })
    }
}

pub(crate) struct ByteCursor<'a> {
    pub bytes: &'a [u8],
    pub at: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated {
                what: "binary payload",
                needed: self.at + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}
