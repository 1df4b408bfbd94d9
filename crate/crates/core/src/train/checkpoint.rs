//! NLZ1 checkpoint files.
//!
//! Layout (little-endian): `NLZ1`, u16 version, u32 length + JSON metadata, u32 entry
//! count, then per entry a u32 name length, the UTF-8 name and an NTF1 tensor. A CRC32
//! of everything before it closes the file.

use std::collections::{BTreeMap, HashMap};
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EarlyStop, HistoryRow, RunSetup};
use crate::datagen::TaskKind;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::tensor::{read_ntf_from, write_ntf_to, AdamConfig, AdamState, AnyTensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLZ1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Position in the training data stream. Batches are a pure function of
/// `(seed, step)`, so this is all a resumed run needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub step: usize,
    pub best_val: Option<f64>,
    pub early: EarlyStop,
    pub stopped_early: bool,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub rng: RngState,
    pub history: Vec<HistoryRow>,
    /// Training episodes seen per task kind.
    pub task_counts: BTreeMap<TaskKind, u64>,
    pub setup: RunSetup,
}

/// Parameters, optimizer moments and training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
}

fn corrupt<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(detail.into()))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let params = ckpt.model.params();
    let names = params.names();
    buf.extend_from_slice(&(3 * names.len() as u32).to_le_bytes());
    let groups: [(&str, &[Tensor<f32>]); 3] = [
        ("param", params.tensors()),
        ("adam.m", &ckpt.adam.m),
        ("adam.v", &ckpt.adam.v),
    ];
    for (prefix, tensors) in groups {
        for (name, t) in names.iter().zip(tensors) {
            let full = format!("{prefix}.{name}");
            buf.extend_from_slice(&(full.len() as u32).to_le_bytes());
            buf.extend_from_slice(full.as_bytes());
            write_ntf_to(t, &mut buf)?;
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    w.write_all(&encode_checkpoint(ckpt)?)?;
    Ok(())
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    if r.read_exact(&mut b).is_err() {
        return corrupt(format!("truncated file while reading {what}"));
    }
    Ok(b)
}

fn take_vec(r: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<Vec<u8>> {
    let left = r.get_ref().len() - r.position() as usize;
    if len > left {
        return corrupt(format!("truncated file while reading {what}"));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    if all.len() < 4 || &all[..4] != CHECKPOINT_MAGIC {
        return corrupt("not an NLZ1 checkpoint (bad magic)");
    }
    if all.len() < 10 {
        return corrupt("truncated file");
    }
    let (body, tail) = all.split_at(all.len() - 4);
    let mut c = Cursor::new(body);
    c.set_position(4);
    let version = u16::from_le_bytes(take(&mut c, "version")?);
    if version != CHECKPOINT_VERSION {
        return corrupt(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        ));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return corrupt("checksum mismatch (truncated or damaged file)");
    }
    let len = u32::from_le_bytes(take(&mut c, "metadata length")?) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&take_vec(&mut c, len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = u32::from_le_bytes(take(&mut c, "entry count")?) as usize;
    let mut table = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = u32::from_le_bytes(take(&mut c, "name length")?) as usize;
        let name = String::from_utf8(take_vec(&mut c, n, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let t = match read_ntf_from(&mut c) {
            Ok(AnyTensor::F32(t)) => t,
            Ok(other) => {
                return corrupt(format!("{name}: expected f32, found {:?}", other.dtype()))
            }
            Err(e) => return corrupt(format!("{name}: {e}")),
        };
        if table.insert(name.clone(), t).is_some() {
            return corrupt(format!("duplicate tensor {name}"));
        }
    }
    if c.position() as usize != body.len() {
        return corrupt("trailing bytes after tensor table");
    }
    let mut model = Model::new(meta.kind, &meta.model, 0)?;
    let mut groups: [HashMap<String, Tensor<f32>>; 3] = Default::default();
    for (name, t) in table {
        let (g, rest) = if let Some(rest) = name.strip_prefix("param.") {
            (0, rest)
        } else if let Some(rest) = name.strip_prefix("adam.m.") {
            (1, rest)
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            (2, rest)
        } else {
            return corrupt(format!("unexpected tensor {name}"));
        };
        groups[g].insert(rest.to_string(), t);
    }
    let [p, m, v] = groups;
    let load = |table, what: &str| -> Result<Vec<Tensor<f32>>> {
        let mut store = model.params().clone();
        store
            .load_named(table)
            .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
        Ok(store.tensors().to_vec())
    };
    let m = load(m, "adam.m")?;
    let v = load(v, "adam.v")?;
    let params = load(p, "param")?;
    model.params_mut().tensors_mut().clone_from_slice(&params);
    let adam = AdamState {
        step: meta.adam_step,
        m,
        v,
        config: meta.adam,
    };
    Ok(Checkpoint { meta, model, adam })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write to a sibling and rename, so a crash never leaves a half-written file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(ckpt)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(f)
}
