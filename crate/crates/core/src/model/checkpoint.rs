//! End-of-run checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VTFZ" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f32 data
//! "META" | u32 entry count
//! per entry:  u32 name length | name (UTF-8) | u8 frozen | u64 step (u64::MAX = none)
//! ```
//!
//! Metadata entries are `layers.{i}` (frozen flag, freeze step) and
//! `heads.{k}` (pruned flag, prune step).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::vit::{LayerState, MimModel};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTFZ";
pub const META_MAGIC: &[u8; 4] = b"META";
pub const VERSION: u32 = 1;
const NO_STEP: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaEntry {
    pub name: String,
    pub flag: bool,
    pub step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Vec<MetaEntry>,
}

fn put_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())
}

pub fn write_checkpoint(ck: &Checkpoint, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ck.tensors {
        put_name(w, name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.write_all(META_MAGIC)?;
    w.write_all(&(ck.meta.len() as u32).to_le_bytes())?;
    for e in &ck.meta {
        put_name(w, &e.name)?;
        w.write_all(&[u8::from(e.flag)])?;
        w.write_all(&e.step.unwrap_or(NO_STEP).to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: msg.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 16 {
            return Err(self.bad(format!("implausible name length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated name: {e}")))?;
        String::from_utf8(buf).map_err(|_| self.bad("name is not UTF-8"))
    }
}

pub fn read_checkpoint(r: impl Read, path: &Path) -> Result<Checkpoint> {
    let mut c = Cursor {
        inner: r,
        path: path.to_path_buf(),
    };
    if &c.bytes::<4>()? != MAGIC {
        return Err(c.bad("missing VTFZ magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.bad(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = c.name()?;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(c.bad(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(c.bytes()?) as f64);
        }
        let t = Tensor::new(shape, data).map_err(|e| c.bad(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if &c.bytes::<4>()? != META_MAGIC {
        return Err(c.bad("missing META block"));
    }
    let entries = c.u32()?;
    let mut meta = Vec::with_capacity(entries as usize);
    for _ in 0..entries {
        let name = c.name()?;
        let flag = c.bytes::<1>()?[0] != 0;
        let step = c.u64()?;
        meta.push(MetaEntry {
            name,
            flag,
            step: (step != NO_STEP).then_some(step),
        });
    }
    Ok(Checkpoint { tensors, meta })
}

impl MimModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let mut meta: Vec<MetaEntry> = self
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| MetaEntry {
                name: format!("layers.{i}"),
                flag: l.frozen,
                step: l.freeze_step.map(|s| s as u64),
            })
            .collect();
        meta.extend(self.heads().iter().enumerate().map(|(k, h)| MetaEntry {
            name: format!("heads.{k}"),
            flag: h.pruned,
            step: h.prune_step.map(|s| s as u64),
        }));
        Checkpoint { tensors, meta }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&self.to_checkpoint(), &mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a model of `config` and overwrites its parameters and
    /// freeze state from a checkpoint.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = MimModel::new(config, 0)?;
        if ck.tensors.len() != model.params().len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model has {}",
                ck.tensors.len(),
                model.params().len()
            )));
        }
        for (name, t) in &ck.tensors {
            let id = model
                .params()
                .find(name)
                .ok_or_else(|| Error::contract(format!("unknown tensor `{name}`")))?;
            let p = model.params_mut().get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "`{name}`: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        let lookup = |name: String| {
            ck.meta
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::contract(format!("missing metadata `{name}`")))
        };
        let layers = (0..model.num_layers())
            .map(|i| {
                lookup(format!("layers.{i}")).map(|e| LayerState {
                    frozen: e.flag,
                    freeze_step: e.step.map(|s| s as usize),
                })
            })
            .collect::<Result<_>>()?;
        let heads = (0..model.heads().len())
            .map(|k| lookup(format!("heads.{k}")).map(|e| (e.flag, e.step.map(|s| s as usize))))
            .collect::<Result<_>>()?;
        model.restore_state(layers, heads)?;
        Ok(model)
    }

    pub fn load_checkpoint(config: ModelConfig, path: &Path) -> Result<Self> {
        let ck = read_checkpoint(BufReader::new(File::open(path)?), path)?;
        Self::from_checkpoint(config, &ck)
    }
}
