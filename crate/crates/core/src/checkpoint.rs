//! Binary checkpoint format.
//!
//! ```text
//! "URWK"  version:u32  count:u32
//! count x { name_len:u16  name:utf8  dtype:u8  rank:u8  extents:u64[rank]  data:le }
//! json_len:u32  json:utf8   {"model": ModelConfig, "meta": any}
//! ```
//!
//! All integers are little-endian. Entries are every parameter and buffer of
//! the model in visit order. The file must be consumed exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Module, Slot};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"URWK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to `f64` (exact for both stored types).
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub config: ModelConfig,
    pub meta: serde_json::Value,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

/// Serializes `model` with free-form `meta` appended to the config blob.
pub fn to_bytes<T: Scalar>(model: &Model<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
    model.visit("", &mut |name, slot| {
        let t = match slot {
            Slot::Param(p) => p.value.clone(),
            Slot::Buffer(b) => b.get(),
        };
        entries.push((name.to_string(), t));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let blob = serde_json::to_vec(&Blob {
        model: model.config().clone(),
        meta: meta.clone(),
    })?;
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8"),
        ))
    }
}

/// Parses a checkpoint without building a model.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return corrupt("bad magic bytes; not a URWK checkpoint");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return corrupt(format!("unsupported format version {version}"));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            t => return corrupt(format!("entry {name}: unknown dtype tag {t}")),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name}: extents overflow")))?;
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let raw = r.take(numel.saturating_mul(width), "tensor data")?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::read_le(c) as f64)
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        entries.push(Entry {
            name,
            dtype,
            shape,
            data,
        });
    }
    let blob_len = r.u32("config length")? as usize;
    let blob: Blob = serde_json::from_slice(r.take(blob_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;
    if r.pos != bytes.len() {
        return corrupt(format!(
            "{} trailing bytes after the config blob",
            bytes.len() - r.pos
        ));
    }
    Ok(Checkpoint {
        entries,
        config: blob.model,
        meta: blob.meta,
    })
}

impl Checkpoint {
    /// Builds the model described by the config blob and loads every entry
    /// into it. Names, shapes and the entry set must match exactly.
    pub fn into_model<T: Scalar>(self) -> Result<Model<T>> {
        let mut model = Model::<T>::build(&self.config)
            .map_err(|e| Error::Incompatible(format!("config blob does not build: {e}")))?;
        let mut by_name: HashMap<String, Entry> = HashMap::new();
        for e in self.entries {
            if by_name.contains_key(&e.name) {
                return Err(Error::Incompatible(format!("duplicate entry {}", e.name)));
            }
            by_name.insert(e.name.clone(), e);
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let e = by_name
                .remove(name)
                .ok_or_else(|| Error::Incompatible(format!("missing weight {name}")))?;
            if e.shape != shape {
                return Err(Error::Incompatible(format!(
                    "{name}: stored shape {:?}, model expects {shape:?}",
                    e.shape
                )));
            }
            let data = e.data.iter().map(|&v| T::from_f64_lossy(v)).collect();
            Tensor::new(e.shape, data)
        };
        let mut result = Ok(());
        model.visit_mut("", &mut |name, p| {
            if result.is_ok() {
                result = take(name, p.value.shape()).map(|t| p.value = t);
            }
        });
        std::mem::replace(&mut result, Ok(()))?;
        model.visit("", &mut |name, slot| {
            if let (Slot::Buffer(b), true) = (slot, result.is_ok()) {
                result = take(name, b.get().shape()).map(|t| b.set(t));
            }
        });
        result?;
        if let Some(name) = by_name.keys().min() {
            return Err(Error::Incompatible(format!(
                "checkpoint has weight {name} that the model does not use"
            )));
        }
        Ok(model)
    }
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, serde_json::Value)> {
    let ck = from_bytes(&fs::read(path)?)?;
    let meta = ck.meta.clone();
    Ok((ck.into_model()?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model<f32> {
        Model::build(&ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn header_layout() {
        let m = tiny();
        let bytes = to_bytes(&m, &serde_json::Value::Null).unwrap();
        assert_eq!(&bytes[..4], b"URWK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let mut slots = 0u32;
        m.visit("", &mut |_, _| slots += 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), slots);
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"stem.conv.weight");
        assert_eq!(bytes[14 + name_len], 0);
        assert_eq!(bytes[15 + name_len], 4);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tiny();
        let meta = serde_json::json!({"epoch": 3});
        let ck = from_bytes(&to_bytes(&m, &meta).unwrap()).unwrap();
        assert_eq!(ck.meta, meta);
        let back: Model<f32> = ck.into_model().unwrap();
        let x = Tensor::<f32>::randn([2, 1, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn trailing_and_truncated_bytes_are_rejected() {
        let mut bytes = to_bytes(&tiny(), &serde_json::Value::Null).unwrap();
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_weight_mismatch_is_incompatible() {
        let m = tiny();
        let mut ck = from_bytes(&to_bytes(&m, &serde_json::Value::Null).unwrap()).unwrap();
        ck.config.stage_widths = Some(vec![8, 24]);
        assert!(matches!(
            ck.into_model::<f32>(),
            Err(Error::Incompatible(_))
        ));
        let mut ck = from_bytes(&to_bytes(&m, &serde_json::Value::Null).unwrap()).unwrap();
        ck.config.ablation.darm = false;
        let e = ck.into_model::<f32>().unwrap_err().to_string();
        assert!(e.contains("bottleneck"), "{e}");
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let m = tiny();
        let ck = from_bytes(&to_bytes(&m, &serde_json::Value::Null).unwrap()).unwrap();
        let wide: Model<f64> = ck.into_model().unwrap();
        assert_eq!(
            wide.head.weight.value.data()[0],
            m.head.weight.value.data()[0] as f64
        );
    }
}
