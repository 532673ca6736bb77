//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "RSLK" | version | len + TOML header | count | count × tensor
//! tensor = len + name | dtype tag (u8) | rank | extents… | values
//! ```
//!
//! The TOML header carries the [`ModelConfig`] and the class names. Tensors
//! are parameters followed by BN running statistics, each in registration
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ResLinkModel};
use crate::params::Named;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"RSLK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    class_names: Vec<String>,
    model: ModelConfig,
}

/// A model together with the class names its outputs index.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ResLinkModel<T>,
    pub class_names: Vec<String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes<T: Element>(model: &ResLinkModel<T>, class_names: &[String]) -> Result<Vec<u8>> {
    let header = Header {
        class_names: class_names.to_vec(),
        model: model.config().clone(),
    };
    let text = toml::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());

    let reg = model.registry();
    let tensors: Vec<&Named<T>> = reg.params().iter().chain(reg.buffers()).collect();
    put_u32(&mut out, tensors.len())?;
    for Named { name, tensor } in tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, tensor.rank())?;
        for &d in tensor.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

/// Decodes a checkpoint, converting stored values to `T` if needed.
pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a ResLink checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let header: Header = toml::from_str(&r.string()?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = ResLinkModel::<T>::build(header.model, 0)?;
    let expected = model.registry().params().len() + model.registry().buffers().len();
    let count = r.u32()?;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, model has {expected}"
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype tag {tag}")))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        model.registry_mut().assign(&name, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        class_names: header.class_names,
    })
}

pub fn save<T: Element>(
    path: impl AsRef<Path>,
    model: &ResLinkModel<T>,
    class_names: &[String],
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, class_names)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
