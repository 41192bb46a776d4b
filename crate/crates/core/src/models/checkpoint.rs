//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"UNITYCKP"  u32 version
//! u32 len, config text (`key = value` lines)
//! u32 count, then per parameter:
//!     u32 len, name, u32 ndim, u64 dims..., f32 values...
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::config::{parse_lines, render, Configurable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UNITYCKP";

/// Named parameter tensors plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                b.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |m: String| Error::Checkpoint { path: origin.into(), message: m };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a checkpoint file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(err("checksum mismatch".into()));
        }
        let mut r = Reader { b: body, pos: MAGIC.len() };
        let version = r.u32().map_err(err)?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let config = r.string().map_err(err)?;
        let n = r.u32().map_err(err)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string().map_err(err)?;
            let ndim = r.u32().map_err(err)? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>().map_err(err)?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4).map_err(err)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(err("trailing bytes".into()));
        }
        Ok(Checkpoint { config, params })
    }

    /// Elementwise mean; every checkpoint must have the same names and shapes.
    pub fn average(items: &[Checkpoint]) -> Result<Checkpoint> {
        let first = items.first().ok_or_else(|| Error::invalid("no checkpoints to average"))?;
        let mut params = first.params.clone();
        for other in &items[1..] {
            if other.params.len() != params.len() {
                return Err(Error::shape("checkpoints have different parameter sets"));
            }
            for ((name, acc), (oname, t)) in params.iter_mut().zip(&other.params) {
                if name != oname || acc.shape() != t.shape() {
                    return Err(Error::shape(format!("parameter mismatch: {name} {:?} vs {oname} {:?}", acc.shape(), t.shape())));
                }
                acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
            }
        }
        let k = items.len() as f64;
        for (_, t) in &mut params {
            t.data_mut().iter_mut().for_each(|a| *a /= k);
        }
        Ok(Checkpoint { config: first.config.clone(), params })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or("truncated file")?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?, &path.display().to_string())
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .ids()
            .map(|id| (self.params.name(id).to_string(), self.params.get(id).clone()))
            .collect();
        Checkpoint { config: render("model", &self.config), params }
    }

    /// Rebuilds the model described by the checkpoint's config and loads
    /// every parameter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut config = ModelConfig::default();
        for (line, key, value) in parse_lines(&ckpt.config, "checkpoint config")? {
            let key = key.strip_prefix("model.").unwrap_or(&key);
            config.set(key, &value).map_err(|message| Error::Config { location: format!("checkpoint config:{line}"), message })?;
        }
        let mut model = Model::new(config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        model.load_params(ckpt, "")?;
        Ok(model)
    }

    /// Copies every checkpoint parameter whose name starts with `prefix`
    /// into this model (names must exist with equal shapes). Returns the
    /// number of tensors copied.
    pub fn load_params(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in ckpt.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.params.assign(name, t)?;
            n += 1;
        }
        Ok(n)
    }
}
