//! Binary snapshot of a run: parameters, optimizer accumulators, the
//! iteration counter and the configuration that produced them.
//!
//! Layout (little endian): magic `RRACKPT\0`, `u32` version, `u64`
//! iteration, length-prefixed config text, named parameter blocks with
//! `(rows, cols)` and `f64` payloads, the optimizer with its
//! hyperparameters and accumulator slots, then an FNV-1a checksum of
//! everything before it.

use std::fs;
use std::path::Path;

use crate::cells::{CellKind, CellParams};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;
use crate::optim::{OptimState, Optimizer};
use crate::tasks::ByteCursor;

const MAGIC: &[u8; 8] = b"RRACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of updates already applied to `params`.
    pub iteration: usize,
    /// `key = value` text of the run configuration.
    pub config: String,
    pub params: ModelParams,
    pub optim: OptimState,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        put_str(&mut out, &self.config);

        let blocks = self.params.blocks();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, (rows, cols), data) in &blocks {
            put_str(&mut out, name);
            out.extend_from_slice(&(*rows as u64).to_le_bytes());
            out.extend_from_slice(&(*cols as u64).to_le_bytes());
            put_f64s(&mut out, data);
        }

        let hyper = match self.optim.optimizer {
            Optimizer::Adadelta { rho, eps } => vec![rho, eps],
            Optimizer::RmsProp { decay, eps, lr } => vec![decay, eps, lr],
        };
        put_str(&mut out, self.optim.optimizer.name());
        put_f64s(&mut out, &hyper);
        out.extend_from_slice(&(self.optim.slots.len() as u32).to_le_bytes());
        for slot in &self.optim.slots {
            out.extend_from_slice(&(slot.len() as u32).to_le_bytes());
            for block in slot {
                put_f64s(&mut out, block);
            }
        }

        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CheckpointFormat);
        }
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::CheckpointCorrupt("missing version".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 + 8 {
            return Err(Error::CheckpointCorrupt("missing checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
        }
        parse_body(body).map_err(|e| match e {
            Error::Truncated { .. } => Error::CheckpointCorrupt("truncated payload".into()),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn corrupt(m: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(m.into())
}

fn get_str(cur: &mut ByteCursor<'_>) -> Result<String> {
    let n = cur.u64()? as usize;
    if n > cur.remaining() {
        return Err(corrupt("string length past end"));
    }
    String::from_utf8(cur.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
}

fn get_f64s(cur: &mut ByteCursor<'_>) -> Result<Vec<f64>> {
    let n = cur.u64()? as usize;
    if n.saturating_mul(8) > cur.remaining() {
        return Err(corrupt("array length past end"));
    }
    (0..n).map(|_| cur.f64()).collect()
}

fn parse_body(body: &[u8]) -> Result<Checkpoint> {
    let mut cur = ByteCursor { bytes: body, at: 12 };
    let iteration = cur.u64()? as usize;
    let config = get_str(&mut cur)?;

    let n_blocks = cur.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(64));
    for _ in 0..n_blocks {
        let name = get_str(&mut cur)?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let data = get_f64s(&mut cur)?;
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(corrupt(format!("block '{name}' has the wrong payload size")));
        }
        blocks.push((name, (rows, cols), data));
    }
    let params = params_from_blocks(&blocks)?;

    let name = get_str(&mut cur)?;
    let hyper = get_f64s(&mut cur)?;
    let optimizer = match (name.as_str(), hyper.as_slice()) {
        ("adadelta", &[rho, eps]) => Optimizer::Adadelta { rho, eps },
        ("rmsprop", &[decay, eps, lr]) => Optimizer::RmsProp { decay, eps, lr },
        _ => return Err(corrupt(format!("unknown optimizer record '{name}'"))),
    };
    let n_slots = cur.u32()? as usize;
    let mut slots = Vec::with_capacity(n_slots.min(4));
    for _ in 0..n_slots {
        let n = cur.u32()? as usize;
        let slot = (0..n).map(|_| get_f64s(&mut cur)).collect::<Result<Vec<_>>>()?;
        let sizes_match =
            slot.len() == blocks.len() && slot.iter().zip(&blocks).all(|(s, (_, _, b))| s.len() == b.len());
        if !sizes_match {
            return Err(corrupt("optimizer slots do not match the parameters"));
        }
        slots.push(slot);
    }
    if cur.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    if slots.len() != OptimState::new(optimizer, &[]).slots.len() {
        return Err(corrupt("wrong number of optimizer slots"));
    }
    let optim = OptimState { optimizer, slots };
    Ok(Checkpoint {
        iteration,
        config,
        params,
        optim,
    })
}

type RawBlock = (String, (usize, usize), Vec<f64>);

fn find<'a>(blocks: &'a [RawBlock], name: &str) -> Option<&'a RawBlock> {
    blocks.iter().find(|(n, _, _)| n == name)
}

fn cell_from_blocks(blocks: &[RawBlock], prefix: &str, input: usize) -> Result<Option<CellParams>> {
    let Some((_, (rows, cols), w)) = find(blocks, &format!("{prefix}.w")) else {
        return Ok(None);
    };
    if rows % 4 != 0 || *rows == 0 || *cols < rows / 4 {
        return Err(corrupt(format!("{prefix}.w has an impossible shape")));
    }
    let h = rows / 4;
    if cols - h != input {
        return Err(corrupt(format!("{prefix}.w does not match the input width")));
    }
    let b = find(blocks, &format!("{prefix}.b")).ok_or_else(|| corrupt(format!("missing {prefix}.b")))?;
    if b.2.len() != 4 * h {
        return Err(corrupt(format!("{prefix}.b has the wrong size")));
    }
    let w_a = find(blocks, &format!("{prefix}.w_a")).map(|(_, _, v)| v.clone());
    let kind = if w_a.is_some() { CellKind::Rra } else { CellKind::Lstm };
    let mut cell = CellParams::zeros(kind, input, h, w_a.as_ref().map_or(0, Vec::len));
    cell.w_gates = Matrix::from_vec(*rows, *cols, w.clone())?;
    cell.b_gates = b.2.clone();
    cell.w_a = w_a;
    Ok(Some(cell))
}

fn params_from_blocks(blocks: &[RawBlock]) -> Result<ModelParams> {
    let embedding = match find(blocks, "embedding") {
        Some((_, (r, c), d)) => Some(Matrix::from_vec(*r, *c, d.clone())?),
        None => None,
    };
    let (_, (rows, cols), _) = find(blocks, "cell.w").ok_or_else(|| corrupt("missing cell.w"))?;
    let input = match &embedding {
        Some(e) => e.cols(),
        None => cols
            .checked_sub(rows / 4)
            .ok_or_else(|| corrupt("cell.w has an impossible shape"))?,
    };
    let cell = cell_from_blocks(blocks, "cell", input)?.ok_or_else(|| corrupt("missing cell.w"))?;
    let cell_rev = cell_from_blocks(blocks, "cell_rev", input)?;
    let (_, (r, c), w) = find(blocks, "readout.w").ok_or_else(|| corrupt("missing readout.w"))?;
    let readout_w = Matrix::from_vec(*r, *c, w.clone())?;
    let (_, _, readout_b) = find(blocks, "readout.b").ok_or_else(|| corrupt("missing readout.b"))?;
    let width = cell.hidden_size * if cell_rev.is_some() { 2 } else { 1 };
    if readout_w.cols() != width || readout_w.rows() != readout_b.len() {
        return Err(corrupt("readout does not match the recurrent layer"));
    }
    let params = ModelParams {
        embedding,
        cell,
        cell_rev,
        readout_w,
        readout_b: readout_b.clone(),
    };
    let names: Vec<&str> = params.blocks().iter().map(|(n, _, _)| *n).collect();
    let stored: Vec<&str> = blocks.iter().map(|(n, _, _)| n.as_str()).collect();
    if names != stored {
        return Err(corrupt("unexpected parameter blocks"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initializers::Rng;
    use crate::model::{InputKind, ModelShape};

    fn sample(cell: CellKind, tokens: bool, bidirectional: bool) -> Checkpoint {
        let shape = ModelShape {
            cell,
            input: if tokens {
                InputKind::Tokens { vocab: 7, dim: 3 }
            } else {
                InputKind::Dense(2)
            },
            hidden: 4,
            window: 3,
            bidirectional,
            outputs: 2,
        };
        let params = ModelParams::init(&shape, &mut Rng::new(1)).unwrap();
        let mut optim = OptimState::for_params(Optimizer::adadelta(), &params);
        for (i, v) in optim.slots.iter_mut().flatten().flatten().enumerate() {
            *v = i as f64 * 0.125;
        }
        Checkpoint {
            iteration: 42,
            config: "task = adding\n".into(),
            params,
            optim,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for ck in [
            sample(CellKind::Rra, false, false),
            sample(CellKind::Lstm, true, true),
            sample(CellKind::Rra, true, true),
        ] {
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            ck.save(&p1).unwrap();
            let back = Checkpoint::load(&p1).unwrap();
            assert_eq!(back, ck);
            back.save(&p2).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn damaged_files_give_distinct_errors() {
        let bytes = sample(CellKind::Rra, false, false).to_bytes();

        let mut magic = bytes.clone();
        magic[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CheckpointFormat)));

        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));

        let mut payload = bytes.clone();
        let mid = payload.len() / 2;
        payload[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&payload),
            Err(Error::CheckpointCorrupt(_))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 20]),
            Err(Error::CheckpointCorrupt(_))
        ));
    }
}
