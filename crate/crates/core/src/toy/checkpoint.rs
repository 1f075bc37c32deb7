//! Little-endian parameter checkpoints.
//!
//! ```text
//! "HSPXNET1"  classes:u32  k_dim:u32  sections:u32
//! per section: name_len:u32  name  count:u64  count × f64
//! ```

use std::path::Path;

use super::net::ToyNetParams;
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"HSPXNET1";

pub fn encode(params: &ToyNetParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((params.classes() as u32).to_le_bytes());
    out.extend((params.k_dim() as u32).to_le_bytes());
    let sections = params.sections();
    out.extend((sections.len() as u32).to_le_bytes());
    for (name, values) in sections {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((values.len() as u64).to_le_bytes());
        for v in values {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::ParseAt {
            offset: self.bytes.len(),
            message: "unexpected end of checkpoint".into(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail(&self, message: String) -> Error {
        Error::ParseAt {
            offset: self.pos,
            message,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<ToyNetParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::ParseAt {
            offset: 0,
            message: "not a network checkpoint".into(),
        });
    }
    let classes = c.u32()? as usize;
    let k_dim = c.u32()? as usize;
    let mut params = ToyNetParams::init(0, classes, k_dim).map_err(|e| c.fail(e.to_string()))?;
    let count = c.u32()? as usize;
    let expected: Vec<(&str, usize)> = params.sections().iter().map(|(n, s)| (*n, s.len())).collect();
    if count != expected.len() {
        return Err(c.fail(format!("{count} sections, expected {}", expected.len())));
    }
    let mut flat = Vec::with_capacity(params.param_count());
    for (name, len) in expected {
        let name_len = c.u32()? as usize;
        let found = c.take(name_len)?;
        if found != name.as_bytes() {
            return Err(c.fail(format!("expected section {name}, found {}", String::from_utf8_lossy(found))));
        }
        let n = c.u64()?;
        if n != len as u64 {
            return Err(c.fail(format!("section {name} has {n} values, expected {len}")));
        }
        for _ in 0..len {
            let v = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(c.fail(format!("non-finite value in {name}")));
            }
            flat.push(v);
        }
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes after checkpoint".into()));
    }
    params.load_flat(&flat)?;
    Ok(params)
}

pub fn save(params: &ToyNetParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(params))
}

pub fn load(path: impl AsRef<Path>) -> Result<ToyNetParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
