//! Named-tensor binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XDTC" | version u32 | config_len u32 | config (UTF-8) | count u32
//! count x ( name_len u32 | name | rank u32 | dims u64 x rank | f32 x numel )
//! ```
//!
//! Model checkpoints embed a TOML document holding the model configuration
//! and the names of frozen parameters. The same container with an empty
//! config stores other tensor collections such as precomputed sentence
//! embeddings.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamSet, Tensor};
use crate::transformer::{ModelConfig, TransformerModel};

pub const MAGIC: &[u8; 4] = b"XDTC";
pub const VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    frozen: Vec<String>,
}

/// Serialize to bytes.
pub fn encode<'t, T: Real + 't>(config: &str, tensors: impl IntoIterator<Item = (&'t str, &'t Tensor<T>)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(config.len(), "config")?.to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&len_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("{what} length {n} exceeds u32")))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
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

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset: at as u64,
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

/// Parse bytes produced by [`encode`].
pub fn decode(buf: &[u8]) -> Result<Container> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let clen = r.u32("config length")? as usize;
    let config = r.string(clen, "config")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = r.string(nlen, "tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(r.fail(format!("tensor `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            if d == 0 {
                return Err(r.fail(format!("tensor `{name}` has a zero extent")));
            }
            shape.push(usize::try_from(d).map_err(|_| r.fail("dimension overflows usize"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(numel, "tensor payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Container { config, tensors })
}

/// Write atomically: the file appears complete or not at all.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_container<'t, T: Real + 't>(
    path: impl AsRef<Path>,
    config: &str,
    tensors: impl IntoIterator<Item = (&'t str, &'t Tensor<T>)>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode(config, tensors)?)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    decode(&fs::read(path)?)
}

/// Serialize a model, including its configuration and frozen flags.
pub fn model_bytes<T: Real>(model: &TransformerModel<T>) -> Result<Vec<u8>> {
    let header = Header {
        model: model.config().clone(),
        frozen: model
            .params()
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.name.clone())
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    encode(&text, model.params().iter().map(|p| (p.name.as_str(), &p.tensor)))
}

pub fn save_checkpoint<T: Real>(model: &TransformerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_bytes(model)?)
}

/// Rebuild a model from a decoded container, validating every tensor
/// against the embedded configuration.
pub fn model_from_container<T: Real>(c: &Container) -> Result<TransformerModel<T>> {
    let header: Header = toml::from_str(&c.config).map_err(|e| Error::Parse {
        offset: 12,
        reason: format!("embedded config: {e}"),
    })?;
    let mut params = ParamSet::new();
    for (name, t) in &c.tensors {
        params.insert(name.clone(), t.cast()).map_err(|_| Error::NamedTensor {
            name: name.clone(),
            reason: "stored twice".into(),
        })?;
    }
    for name in &header.frozen {
        params
            .get_mut(name)
            .ok_or_else(|| Error::NamedTensor {
                name: name.clone(),
                reason: "marked frozen but not stored".into(),
            })?
            .frozen = true;
    }
    TransformerModel::new(header.model, params)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<TransformerModel<T>> {
    model_from_container(&read_container(path)?)
}

/// Exact byte size of a container holding `config` and tensors of the
/// given names and shapes.
pub fn expected_size<'a>(config: &str, tensors: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> usize {
    let header = 4 + 4 + 4 + config.len() + 4;
    header
        + tensors
            .into_iter()
            .map(|(n, s)| 4 + n.len() + 4 + 8 * s.len() + 4 * s.iter().product::<usize>())
            .sum::<usize>()
}
