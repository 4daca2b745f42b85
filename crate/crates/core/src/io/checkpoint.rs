//! Binary checkpoints: config plus every parameter as `f32`.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "U3M\x01"
//! version  u32
//! config   u64 length + UTF-8 config text
//! count    u32 number of parameter records
//! record   u32 name length, name, u32 rank, rank x u64 dims, f32 payload
//! crc      u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::config_file::{parse_config, to_config_string};
use crate::model::U3m;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"U3M\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameters in store order.
    pub params: Vec<(String, Tensor)>,
}

pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = to_config_string(cfg);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.to_f32_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("record overruns the file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64, what: &str) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} is too large")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Crc {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    let n = r.u64("config length")?;
    let n = r.len(n, "config length")?;
    let text =
        std::str::from_utf8(r.take(n, "config")?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config = parse_config(text)?;

    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            let d = r.u64("dims")?;
            shape.push(r.len(d, "dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape {shape:?} is too large")))?;
        let raw = r.take(numel, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((name.clone(), Tensor::from_f32(&shape, &data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected bytes after the last record",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, params })
}

impl Checkpoint {
    /// Copies every checkpoint tensor into the same-named parameter of
    /// `store`. Shapes are compared first, so a checkpoint from a different
    /// architecture fails with the first mismatching parameter.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            if let Some(p) = store.by_name(name) {
                if p.tensor.shape() != t.shape() {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: p.tensor.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        if let Some((name, _)) = self.params.iter().find(|(n, _)| store.id(n).is_none()) {
            return Err(Error::Checkpoint(format!("checkpoint has unknown parameter `{name}`")));
        }
        if let Some(p) = store.iter().find(|p| !self.params.iter().any(|(n, _)| *n == p.name)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{}`", p.name)));
        }
        for (name, t) in &self.params {
            let id = store.id(name).expect("checked above");
            *store.tensor_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config and loads its
    /// weights.
    pub fn into_model(self) -> Result<(U3m, ParamStore)> {
        let (model, mut store) = U3m::new(&self.config, 0)?;
        self.restore(&mut store)?;
        Ok((model, store))
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
