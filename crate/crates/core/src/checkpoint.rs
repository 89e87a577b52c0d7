//! Binary parameter checkpoints.
//!
//! Layout (little endian): the 8-byte magic `RDBCKPT\0`, a `u32` format version,
//! then entries until end of file. Each entry is a `u32` name length, the UTF-8
//! name, a `u8` dtype tag (0 = f32, 1 = f64), a `u8` rank, `rank` `u64` dims and
//! the raw element payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Real, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RDBCKPT\0";
pub const VERSION: u32 = 1;

/// One named tensor read from a checkpoint, still in its stored dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    payload: Vec<u8>,
}

impl Entry {
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let size = self.dtype.size();
        let data: Vec<T> = self
            .payload
            .chunks_exact(size)
            .map(|b| match self.dtype {
                DType::F32 => T::c(f32::from_le_slice(b) as f64),
                DType::F64 => T::c(f64::from_le_slice(b)),
            })
            .collect();
        Tensor::from_vec(self.shape, data).expect("payload length checked on decode")
    }
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(4);
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.to_le_bytes_into(&mut out);
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: dtype tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} > 4")));
        }
        let mut shape = [1usize; 4];
        for i in 0..rank {
            shape[4 - rank + i] = r.u64("dims")? as usize;
        }
        let payload = r.take(numel(shape) * dtype.size(), "payload")?.to_vec();
        entries.push(Entry {
            name,
            dtype,
            shape,
            payload,
        });
    }
    Ok(entries)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrite every parameter in `store` from `entries`. Every parameter must be
/// present with a matching shape; unknown names are rejected.
pub fn restore<T: Real>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for e in entries {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != e.shape {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in file, {:?} expected",
                e.name,
                e.shape,
                p.value.shape()
            )));
        }
        p.value = e.to_tensor();
        seen[id.index()] = true;
    }
    if let Some((id, _)) = seen.iter().enumerate().find(|(_, s)| !**s) {
        let name = &store.iter().nth(id).unwrap().1.name;
        return Err(Error::Checkpoint(format!("missing parameter {name}")));
    }
    Ok(())
}

pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    restore(store, &read(path)?)
}
