//! `CCVA` tensor container.
//!
//! ```text
//! "CCVA" | u32 version | u32 count
//! per tensor: u32 name_len | name | u8 dtype | u8 rank | rank x u64 dims | data (LE)
//! u32 CRC32 of everything before it
//! ```
//! Tensors are written in name order. Optimizer moments are stored as
//! `opt.m/<param>` and `opt.v/<param>`, counters as `state/counters`.

use std::collections::BTreeMap;
use std::path::Path;

use super::optim::{AdamW, Moments};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"CCVA";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Training position stored alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// 0-based stage index.
    pub stage: u64,
    /// Steps completed within the stage.
    pub step: u64,
    /// Optimizer update count.
    pub opt_t: u64,
    /// 1 when the stage's data order and schedule are complete.
    pub stage_done: u64,
}

pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, opt: Option<&AdamW>, counters: Counters) -> Self {
        let mut tensors = BTreeMap::new();
        for (_, name, t) in store.iter() {
            tensors.insert(name.to_string(), t.clone());
        }
        if let Some(o) = opt {
            for (name, st) in &o.state {
                tensors.insert(format!("opt.m/{name}"), Tensor::vector(st.m.clone()));
                tensors.insert(format!("opt.v/{name}"), Tensor::vector(st.v.clone()));
            }
        }
        let c = [counters.stage, counters.step, counters.opt_t, counters.stage_done];
        tensors.insert("state/counters".into(), Tensor::vector(c.iter().map(|&v| v as f64).collect()));
        Checkpoint { tensors }
    }

    pub fn counters(&self) -> Result<Counters> {
        let c = self
            .tensors
            .get("state/counters")
            .ok_or_else(|| Error::Format("checkpoint has no counters".into()))?;
        let d = c.data();
        if d.len() != 4 {
            return Err(Error::Format("counters must hold 4 values".into()));
        }
        Ok(Counters {
            stage: d[0] as u64,
            step: d[1] as u64,
            opt_t: d[2] as u64,
            stage_done: d[3] as u64,
        })
    }

    /// Copies weights into `store`. Every parameter must be present with its
    /// configured shape.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, the model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        for name in self.tensors.keys() {
            if !name.starts_with("opt.") && !name.starts_with("state/") && store.id(name).is_none() {
                return Err(Error::Format(format!("checkpoint tensor `{name}` is not a model parameter")));
            }
        }
        Ok(())
    }

    /// Optimizer state, if any moments were saved.
    pub fn optimizer(&self, template: &AdamW) -> Result<Option<AdamW>> {
        if !self.tensors.keys().any(|k| k.starts_with("opt.m/")) {
            return Ok(None);
        }
        let mut opt = template.clone();
        opt.t = self.counters()?.opt_t;
        let mut state = BTreeMap::new();
        for (name, st) in &template.state {
            let get = |p: &str| {
                self.tensors
                    .get(&format!("{p}/{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing optimizer state for `{name}`")))
            };
            let (m, v) = (get("opt.m")?, get("opt.v")?);
            if m.numel() != st.m.len() || v.numel() != st.v.len() {
                return Err(Error::Format(format!("optimizer state for `{name}` has the wrong size")));
            }
            state.insert(
                name.clone(),
                Moments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                },
            );
        }
        opt.state = state;
        Ok(Some(opt))
    }

    pub fn has_optimizer_state_for(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(&format!("opt.m/{prefix}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a CCVA checkpoint (bad magic)".into()));
        }
        let mut r = Reader { b: bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = match dtype {
                DTYPE_F64 => r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                DTYPE_F32 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                other => return Err(Error::Format(format!("unknown dtype code {other} for `{name}`"))),
            };
            tensors.insert(name, Tensor::new(dims, data).map_err(|e| Error::Corrupt(e.to_string()))?);
        }
        let body = r.pos;
        let crc = r.u32()?;
        if crc != crc32fast::hash(&bytes[..body]) {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after checksum".into()));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&b)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Corrupt("checkpoint is truncated".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
