//! Binary checkpoint format.
//!
//! ```text
//! "TSF1"
//! u32 config length, config text (`key = value` lines)
//! u32 parameter count
//! per parameter: u32 name length, name, 4 x u32 dims, f32 data
//! u64 FNV-1a checksum of every byte between the magic and the checksum
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TsFormer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSF1";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(model: &TsFormer) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let config = model.config.to_text();
    out.extend((config.len() as u32).to_le_bytes());
    out.extend(config.as_bytes());
    out.extend((model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        for d in p.value.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out[MAGIC.len()..]);
    out.extend(sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Parsed checkpoint contents: the stored config and `(name, tensor)` records in order.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a64(&payload[MAGIC.len()..]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: payload,
        pos: MAGIC.len(),
    };
    let config = ModelConfig::from_text(&r.string("config")?)?;
    let count = r.u32("parameter count")?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32("parameter shape")?;
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "parameter data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        records.push((name, value));
    }
    if r.pos != payload.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", payload.len() - r.pos)));
    }
    Ok((config, records))
}

pub fn save(model: &TsFormer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

/// Rebuilds the model described by the checkpoint header and loads its parameters.
///
/// With `expected`, the stored config must match it field by field.
pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<TsFormer> {
    let bytes = std::fs::read(path)?;
    let (config, records) = decode(&bytes)?;
    if let Some(exp) = expected {
        config.check_matches(exp)?;
    }
    let mut model = TsFormer::new(config, 0)?;
    if records.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            model.params.len()
        )));
    }
    for (id, (name, value)) in model.params.ids().collect::<Vec<_>>().into_iter().zip(records) {
        let expected_name = &model.params.get(id).name;
        if *expected_name != name {
            return Err(Error::Format(format!("parameter `{name}` found where `{expected_name}` was expected")));
        }
        model.params.set_value(id, value)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn bad_magic_is_format_error() {
        assert!(matches!(decode(b"XXXX0000000000"), Err(Error::Format(_))));
    }
}
