//! Flat parameter checkpoints: an ordered list of `(name, shape, values)`
//! records, values as little-endian f64.
//!
//! Layout: magic `PXRLCKPT`, u32 version, u64 record count, then per record
//! a u32 name length, UTF-8 name, u32 rank, u64 dims, f64 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PXRLCKPT";
const VERSION: u32 = 1;

pub fn encode(store: &ParamStore, ids: &[ParamId]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for &id in ids {
        let name = store.name(id).as_bytes();
        let value = store.value(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err("not a parameter checkpoint".into());
    }
    let truncated = || "truncated".to_string();
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u64().ok_or_else(truncated)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize).ok_or_else(truncated))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("{name}: shape overflows"))?;
        let raw = c
            .take(n.checked_mul(8).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after last record".into());
    }
    Ok(records)
}

pub fn save(store: &ParamStore, ids: &[ParamId], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store, ids)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|d| Error::format(path, d))
}

/// Loads records into `ids`. The checkpoint must list exactly these
/// parameters, in this order, with identical shapes; nothing is written
/// unless every record matches.
pub fn load_exact(store: &mut ParamStore, ids: &[ParamId], records: &[(String, Tensor)]) -> Result<()> {
    if records.len() != ids.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} parameters, network has {}",
            records.len(),
            ids.len()
        )));
    }
    for (&id, (name, t)) in ids.iter().zip(records) {
        check_match(store, id, name, t)?;
    }
    for (&id, (_, t)) in ids.iter().zip(records) {
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

/// Loads every record whose name passes `keep` into the same-named
/// parameter of `store`. All kept records must exist with matching shapes.
/// Returns the number of parameters written.
pub fn load_matching(
    store: &mut ParamStore,
    records: &[(String, Tensor)],
    keep: impl Fn(&str) -> bool,
) -> Result<usize> {
    let mut plan = Vec::new();
    for (name, t) in records.iter().filter(|(n, _)| keep(n)) {
        let id = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint parameter {name} has no counterpart")))?;
        check_match(store, id, name, t)?;
        plan.push((id, t));
    }
    for &(id, t) in &plan {
        *store.value_mut(id) = t.clone();
    }
    Ok(plan.len())
}

fn check_match(store: &ParamStore, id: ParamId, name: &str, t: &Tensor) -> Result<()> {
    if store.name(id) != name {
        return Err(Error::Contract(format!(
            "checkpoint record {name} where {} was expected",
            store.name(id)
        )));
    }
    if store.value(id).shape() != t.shape() {
        return Err(Error::Contract(format!(
            "{name}: checkpoint shape {:?}, network shape {:?}",
            t.shape(),
            store.value(id).shape()
        )));
    }
    Ok(())
}
