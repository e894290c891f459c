//! `SFAV1` binary checkpoint format.
//!
//! Little-endian, no padding:
//!
//! ```text
//! magic      5 bytes  "SFAV1"
//! version    u8       1
//! meta_len   u32      followed by meta_len bytes of UTF-8 JSON
//! count      u32      number of records
//! record     name_len u16, name bytes, ndim u8, ndim × u32 dims,
//!            product(dims) × f32 values
//! ```
//!
//! Records are written in lexicographic name order, so saving the same store
//! twice yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FEModelConfig, Group, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 5] = b"SFAV1";
pub const VERSION: u8 = 1;

/// Descriptive metadata stored alongside the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: FEModelConfig,
    pub stage: String,
    pub epoch: f64,
    pub dataset_seed: u64,
}

impl CheckpointMeta {
    pub fn new(config: FEModelConfig, stage: impl Into<String>, epoch: f64, dataset_seed: u64) -> Self {
        CheckpointMeta {
            config,
            stage: stage.into(),
            epoch,
            dataset_seed,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    groups: BTreeMap<String, Group>,
    frozen: Vec<Group>,
}

/// A parameter snapshot with its metadata. Values are held as `f32`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_store<F: Real>(store: &ParamStore<F>, meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            store: store.cast(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        save(&self.store, &self.meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = load(bytes)?;
        Ok(Checkpoint { meta, store })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters converted to the working precision.
    pub fn params<F: Real>(&self) -> ParamStore<F> {
        self.store.cast()
    }
}

/// Serialize a store. Values are written as `f32`.
pub fn save<F: Real>(store: &ParamStore<F>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        groups: store
            .names()
            .map(|n| {
                Group::of(n)
                    .map(|g| (n.to_string(), g))
                    .ok_or_else(|| Error::UnknownGroup(n.to_string()))
            })
            .collect::<Result<_>>()?,
        frozen: store.frozen_groups().collect(),
    };
    let meta_json = serde_json::to_vec(&header).map_err(|e| Error::BadMeta(e.to_string()))?;

    let mut out = Vec::with_capacity(64 + meta_json.len() + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32::try_from(meta_json.len()).expect("meta fits u32").to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&u32::try_from(store.len()).expect("count fits u32").to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::BadMeta(format!("record name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.shape().len()).expect("rank fits u8"));
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parse an `SFAV1` stream.
pub fn load<F: Real>(bytes: &[u8]) -> Result<(ParamStore<F>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), &|| "magic".into()).map_err(|_| {
        Error::BadMagic(bytes[..bytes.len().min(MAGIC.len())].to_vec())
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic.to_vec()));
    }
    let version = r.u8(&|| "version".into())?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = r.u32(&|| "metadata length".into())? as usize;
    let meta_bytes = r.take(meta_len, &|| "metadata".into())?;
    let header: Header =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::BadMeta(e.to_string()))?;
    let count = r.u32(&|| "record count".into())? as usize;

    let mut store = ParamStore::<F>::new();
    for &g in &header.frozen {
        store.set_frozen(g, true);
    }
    let mut last = String::from("<none>");
    for i in 0..count {
        let at = |field: &'static str| move || format!("record #{i} {field}");
        let name_len = r.u16(&at("name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &at("name"))?)
            .map_err(|_| Error::BadMeta(format!("record #{i} name is not UTF-8")))?
            .to_string();
        let ctx = |field: &str| format!("record `{name}` {field}");
        let ndim = r.u8(&|| ctx("rank"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&|| ctx("dims"))? as usize);
        }
        let declared: usize = shape.iter().product();
        if ndim == 0 || declared == 0 {
            return Err(Error::LengthMismatch {
                name,
                declared,
                found: 0,
            });
        }
        let raw = r.take(declared * 4, &|| ctx("values"))?;
        let values: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::from_f64_lossy(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        let group = header
            .groups
            .get(&name)
            .copied()
            .ok_or_else(|| Error::UnknownGroup(name.clone()))?;
        if Group::of(&name) != Some(group) {
            return Err(Error::UnknownGroup(name));
        }
        store.insert(&name, &Tensor::new(&shape, values)?)?;
        last = name;
    }
    if r.remaining() > 0 {
        let declared = store.get(&last).map(|t| t.numel()).unwrap_or(0);
        return Err(Error::LengthMismatch {
            found: declared + r.remaining() / 4,
            name: last,
            declared,
        });
    }
    if header.groups.len() != store.len() {
        return Err(Error::BadMeta(format!(
            "group map lists {} records but the stream holds {}",
            header.groups.len(),
            store.len()
        )));
    }
    Ok((store, header.meta))
}
