//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ENCAPCKP" | version u32 | dtype u8 | config_len u64 | config (UTF-8 TOML)
//! entries u32 | per entry: name_len u16, name, trainable u8, ndim u8, dims u32…
//! raw element arrays in manifest order
//! ```

use std::path::Path;

use encap_autodiff::{DType, Real, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"ENCAPCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
}

/// Parsed checkpoint: the embedded config text plus tensors in store order.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub config: String,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: Vec<Tensor<F>>,
}

pub fn encode<F: Real>(store: &ParamStore<F>, config: &str) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::DTYPE.tag());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, p) in store.iter() {
        out.extend_from_slice(&F::to_le_bytes_vec(p.value.data()));
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Length(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    if dtype != F::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {dtype:?}, requested {:?}", F::DTYPE)));
    }
    let clen = r.u64()? as usize;
    let config = String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestEntry { name, trainable, shape });
    }
    let width = std::mem::size_of::<F>();
    let mut tensors = Vec::with_capacity(n);
    for e in &manifest {
        let count: usize = e.shape.iter().product();
        let data = F::from_le_bytes_slice(r.take(count * width)?);
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Length(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, manifest, tensors })
}

/// Copies checkpoint tensors into a store built from the same config,
/// checking names and shapes entry by entry.
pub fn restore<F: Real>(ckpt: &Checkpoint<F>, store: &mut ParamStore<F>) -> Result<()> {
    if ckpt.manifest.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model has {}",
            ckpt.manifest.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for ((e, t), id) in ckpt.manifest.iter().zip(&ckpt.tensors).zip(ids) {
        let p = store.get(id);
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint entry {} {:?} does not match model parameter {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

pub fn save<F: Real>(path: &Path, store: &ParamStore<F>, config: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(store, config)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Element type of a checkpoint file, read from its header.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    DType::from_tag(bytes[12]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[12])))
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
