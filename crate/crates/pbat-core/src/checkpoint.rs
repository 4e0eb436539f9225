//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PBAT"
//! version u32 = 1
//! count   u32                      number of tensors
//! entry×count:
//!   name_len u32, name bytes (UTF-8), rank u32, dims u32 × rank
//! data    f32 × Σ len, one tensor after another in entry order
//! ```
//!
//! Values are stored in single precision. Freshly initialized parameters
//! are already rounded to f32, so an init → save → load round trip is
//! bit-exact; checkpoints of trained models round to the nearest f32 on
//! save.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PbatError, Result};
use crate::params::{HyperParams, ModelParams};

const MAGIC: &[u8; 4] = b"PBAT";
const VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let metas = params.store.metas();
    w.write_all(&(metas.len() as u32).to_le_bytes())?;
    for meta in metas {
        let name = meta.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(meta.dims.len() as u32).to_le_bytes())?;
        for &d in &meta.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for meta in metas {
        let data = &params.store.data()[meta.offset..meta.offset + meta.len()];
        for &x in data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Entry {
    name: String,
    dims: Vec<usize>,
}

impl Entry {
    fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_header(r: &mut impl Read) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PbatError::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(PbatError::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(r)? as usize;
    if count == 0 || count > 1_000_000 {
        return Err(PbatError::Format(format!("implausible tensor count {count}")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(PbatError::Format(format!("implausible tensor name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| PbatError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(PbatError::Format(format!("implausible tensor rank {rank} for {name}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        entries.push(Entry { name, dims });
    }
    Ok(entries)
}

/// Reconstructs the hyperparameters a checkpoint was written with from its
/// table shapes and tensor names.
fn infer_hyperparams(entries: &[Entry]) -> Result<HyperParams> {
    let find = |name: &str| -> Result<&Entry> {
        entries.iter().find(|e| e.name == name).ok_or_else(|| {
            PbatError::Format(format!("checkpoint is missing tensor {name}"))
        })
    };
    let item = find("item_mean")?;
    let user = find("user_mean")?;
    let behavior = find("behavior_mean")?;
    let position = find("position_mean")?;
    if item.dims.len() != 2 || item.dims[0] < 3 {
        return Err(PbatError::Format("item_mean table has implausible shape".into()));
    }
    let embed_dim = item.dims[1];
    let num_items = (item.dims[0] - 2) as u32;
    let num_users = user.dims[0] as u32;
    let num_behaviors = (behavior.dims[0] - 1) as u32;
    let seq_len = position.dims[0];

    let mut n_blocks = 0usize;
    let mut n_heads = 0usize;
    for e in entries {
        if let Some(rest) = e.name.strip_prefix("block") {
            if let Some((block, tail)) = rest.split_once('.') {
                if let Ok(b) = block.parse::<usize>() {
                    n_blocks = n_blocks.max(b + 1);
                }
                if let Some(head_rest) = tail.strip_prefix("head") {
                    if let Some((head, _)) = head_rest.split_once('.') {
                        if let Ok(h) = head.parse::<usize>() {
                            n_heads = n_heads.max(h + 1);
                        }
                    }
                }
            }
        }
    }
    let ffl = find("block0.ffl0.w1_mean")?;
    if ffl.dims.len() != 2 {
        return Err(PbatError::Format("block0.ffl0.w1_mean has implausible shape".into()));
    }
    let ffn_dim = ffl.dims[1];

    let hp = HyperParams {
        embed_dim,
        seq_len,
        n_blocks,
        n_heads,
        ffn_dim,
        num_items,
        num_users,
        num_behaviors,
    };
    hp.validate()?;
    Ok(hp)
}

fn read_into(r: &mut impl Read, entries: &[Entry], params: &mut ModelParams) -> Result<()> {
    for entry in entries {
        let id = params.store.find(&entry.name).ok_or_else(|| {
            PbatError::Format(format!("checkpoint tensor {} has no slot in the model", entry.name))
        })?;
        let meta = params.store.meta(id);
        if meta.dims != entry.dims {
            return Err(PbatError::ShapeMismatch {
                name: entry.name.clone(),
                expected: meta.dims.clone(),
                got: entry.dims.clone(),
            });
        }
        let range = params.store.range(id);
        let mut buf = vec![0u8; entry.len() * 4];
        r.read_exact(&mut buf)?;
        let dst = &mut params.store.data_mut()[range];
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    Ok(())
}

/// Loads a checkpoint, inferring the model dimensions from the stored
/// tensor shapes.
pub fn load(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let entries = read_header(&mut r)?;
    let hp = infer_hyperparams(&entries)?;
    let mut params = ModelParams::zeroed(hp)?;
    if entries.len() != params.store.metas().len() {
        return Err(PbatError::Format(format!(
            "checkpoint holds {} tensors, the model needs {}",
            entries.len(),
            params.store.metas().len()
        )));
    }
    read_into(&mut r, &entries, &mut params)?;
    Ok(params)
}

/// Loads a checkpoint and verifies it matches the expected hyperparameters,
/// naming the first mismatching tensor.
pub fn load_expect(path: &Path, expected: &HyperParams) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let entries = read_header(&mut r)?;
    let mut params = ModelParams::zeroed(expected.clone())?;
    if entries.len() != params.store.metas().len() {
        return Err(PbatError::Format(format!(
            "checkpoint holds {} tensors, the model needs {}",
            entries.len(),
            params.store.metas().len()
        )));
    }
    read_into(&mut r, &entries, &mut params)?;
    Ok(params)
}
