//! Binary container for named f32 arrays behind a JSON header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [8] | version u32 | header_len u64 | header (UTF-8 JSON)
//! n_arrays u32 | { name_len u32 | name | ndim u32 | dims u64 × ndim | f32 × numel }*
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub type NamedArrays = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GBMDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_container<W: Write>(
    mut w: W,
    magic: &[u8; 8],
    version: u32,
    header: &str,
    arrays: &NamedArrays,
) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, (shape, values)) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated container while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a container, returning `(header, arrays)`.
pub fn read_container(
    bytes: &[u8],
    magic: &[u8; 8],
    version: u32,
) -> Result<(String, NamedArrays)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != magic {
        return Err(Error::Checkpoint("bad magic: not a gbmd container".into()));
    }
    let got = c.u32("version")?;
    if got != version {
        return Err(Error::Checkpoint(format!(
            "format version {got} is not supported (expected {version})"
        )));
    }
    let header_len = c.u64("header length")? as usize;
    let header = std::str::from_utf8(c.take(header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header is not UTF-8: {e}")))?
        .to_string();
    let n = c.u32("array count")?;
    let mut arrays = BTreeMap::new();
    for _ in 0..n {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("array name is not UTF-8: {e}")))?
            .to_string();
        let ndim = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("array `{name}` is too large")))?;
        let raw = c.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("array `{name}` is too large")))?,
            &name,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if arrays.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last array",
            bytes.len() - c.pos
        )));
    }
    Ok((header, arrays))
}

pub fn read_all(path: &std::path::Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedArrays {
        let mut a = BTreeMap::new();
        a.insert("w".to_string(), (vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]));
        a.insert("b".to_string(), (vec![1], vec![7.0]));
        a
    }

    fn encode(arrays: &NamedArrays) -> Vec<u8> {
        let mut buf = Vec::new();
        write_container(&mut buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "{\"k\":1}", arrays).unwrap();
        buf
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let arrays = sample();
        let buf = encode(&arrays);
        let (header, back) = read_container(&buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION).unwrap();
        assert_eq!(header, "{\"k\":1}");
        for (k, (s, v)) in &arrays {
            let (s2, v2) = &back[k];
            assert_eq!(s, s2);
            let bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            let bits2: Vec<u32> = v2.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, bits2);
        }
    }

    #[test]
    fn version_mismatch() {
        let buf = encode(&sample());
        let err = read_container(&buf, CHECKPOINT_MAGIC, 2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn corrupted_inputs() {
        let mut buf = encode(&sample());
        assert!(read_container(&buf[..buf.len() - 3], CHECKPOINT_MAGIC, 1).is_err());
        buf[0] = b'X';
        assert!(read_container(&buf, CHECKPOINT_MAGIC, 1).is_err());
        let mut buf = encode(&sample());
        // Inflate the header length far past the end of the file.
        buf[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(read_container(&buf, CHECKPOINT_MAGIC, 1).is_err());
        let mut buf = encode(&sample());
        buf.push(0);
        assert!(read_container(&buf, CHECKPOINT_MAGIC, 1).is_err());
    }
}
