//! The `MSLB` parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSLB" | version u32 | config_len u32 | config JSON | n_records u32
//! per record: name_len u32 | name | rank u32 | extents u32 × rank
//!             | values f32 × Π extents | crc32 u32
//! ```
//!
//! The CRC covers the record's name, extents and values. Records are
//! written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MSLB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical JSON of the run config that produced the parameters.
    pub config: String,
    pub records: BTreeMap<String, Tensor<f32>>,
}

fn format_err(record: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Format {
        record: record.into(),
        detail: detail.into(),
    }
}

fn record_crc(name: &str, extents: &[u32], values: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(name.as_bytes());
    for e in extents {
        h.update(&e.to_le_bytes());
    }
    h.update(values);
    h.finalize()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format_err(record, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, record: &str, what: &str) -> Result<u32> {
        let b = self.take(4, record, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.records.insert(name.into(), t);
    }

    /// Adds every tensor of `store` as `{prefix}/{name}`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.records
            .get(name)
            .ok_or_else(|| Error::Dependency(format!("checkpoint has no record `{name}`")))
    }

    /// Tensors under `{prefix}/`, with the prefix stripped.
    pub fn store(&self, prefix: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        let p = format!("{prefix}/");
        for (name, t) in &self.records {
            if let Some(local) = name.strip_prefix(&p) {
                out.insert(local, t.clone());
            }
        }
        out
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.records.keys().any(|k| k.starts_with(&p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let extents: Vec<u32> = t.shape().iter().map(|&e| e as u32).collect();
            out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
            for e in &extents {
                out.extend_from_slice(&e.to_le_bytes());
            }
            let values: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            out.extend_from_slice(&values);
            out.extend_from_slice(&record_crc(name, &extents, &values).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header", "magic")? != MAGIC {
            return Err(format_err("header", "bad magic; not an MSLB checkpoint"));
        }
        let version = r.u32("header", "version")?;
        if version != VERSION {
            return Err(format_err("header", format!("unsupported version {version} (expected {VERSION})")));
        }
        let n = r.u32("config", "length")? as usize;
        let config = std::str::from_utf8(r.take(n, "config", "text")?)
            .map_err(|_| format_err("config", "not UTF-8"))?
            .to_string();
        let count = r.u32("header", "record count")?;
        let mut records = BTreeMap::new();
        for i in 0..count {
            let label = format!("record #{i}");
            let n = r.u32(&label, "name length")? as usize;
            let name = std::str::from_utf8(r.take(n, &label, "name")?)
                .map_err(|_| format_err(&label, "name is not UTF-8"))?
                .to_string();
            let rank = r.u32(&name, "rank")? as usize;
            if rank > 8 {
                return Err(format_err(&name, format!("implausible rank {rank}")));
            }
            let extents = (0..rank).map(|_| r.u32(&name, "extents")).collect::<Result<Vec<u32>>>()?;
            let len = extents
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e as usize))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| format_err(&name, "extents overflow"))?;
            let values = r.take(len, &name, "values")?;
            let crc = r.u32(&name, "checksum")?;
            if crc != record_crc(&name, &extents, values) {
                return Err(format_err(&name, "checksum mismatch; the record is corrupted"));
            }
            let data: Vec<f32> = values
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let shape = extents.iter().map(|&e| e as usize).collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(&name, e.to_string()))?;
            if records.insert(name.clone(), t).is_some() {
                return Err(format_err(&name, "duplicate record"));
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailer", format!("{} unexpected bytes after the last record", bytes.len() - r.pos)));
        }
        Ok(Self { config, records })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency(format!("missing checkpoint {}", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("{}");
        c.insert("a/w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        c.insert("b", Tensor::scalar(0.25));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("`b`") || err.to_string().contains(" b:"), "{err}");
    }
}
