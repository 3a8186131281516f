//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPAN1"  u16 version
//! u32 len  model config text (UTF-8)
//! u32 tensor count
//! per tensor: u16 name len, name, u8 rank, rank × u32 dims, f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::config::{model_text, parse_model_text};
use crate::error::{Error, Result};
use crate::network::SpanModel;

pub const MAGIC: &[u8; 5] = b"SPAN1";
pub const VERSION: u16 = 1;

pub fn encode(model: &SpanModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model_text(model.config());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store().len() as u32).to_le_bytes());
    for p in model.store().iter() {
        out.extend_from_slice(&(p.name().len() as u16).to_le_bytes());
        out.extend_from_slice(p.name().as_bytes());
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint { offset: self.pos, reason: reason.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|e| Error::CorruptCheckpoint {
            offset: start + e.valid_up_to(),
            reason: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<SpanModel> {
    let mut r = Reader { bytes, pos: 0 };
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(head).into_owned(),
        });
    }
    r.pos = MAGIC.len();
    let version = r.u16("version")?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let text_len = r.u32("config length")? as usize;
    let text_start = r.pos;
    let text = r.utf8(text_len, "model config")?;
    let config = parse_model_text(text)
        .map_err(|e| Error::CorruptCheckpoint { offset: text_start, reason: format!("model config: {e}") })?;
    let mut model = SpanModel::new(config)
        .map_err(|e| Error::CorruptCheckpoint { offset: text_start, reason: format!("model config: {e}") })?;
    let count = r.u32("tensor count")? as usize;
    if count != model.store().len() {
        r.pos -= 4;
        return Err(r.corrupt(format!("{count} tensors stored, model has {}", model.store().len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?;
        let id = model
            .store()
            .find(name)
            .ok_or_else(|| Error::CorruptCheckpoint { offset: name_at, reason: format!("unknown tensor `{name}`") })?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::CorruptCheckpoint { offset: name_at, reason: format!("duplicate tensor `{name}`") });
        }
        let dims_at = r.pos;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let expected = model.store().get(id).shape().to_vec();
        if shape != expected {
            return Err(Error::CorruptCheckpoint {
                offset: dims_at,
                reason: format!("tensor `{name}` has shape {shape:?}, expected {expected:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let v = r.f64("tensor values")?;
            if !v.is_finite() {
                return Err(Error::CorruptCheckpoint { offset: at, reason: format!("non-finite value in `{name}`") });
            }
            values.push(v);
        }
        model.store_mut().get_mut(id).values_mut().copy_from_slice(&values);
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &SpanModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SpanModel> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
