//! Flat binary container of named `f32` tensors.
//!
//! Layout (little-endian): the magic bytes, a `u32` entry count, then per
//! entry a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32`
//! dims and the row-major `f32` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::Tensor;

pub const CKPT_MAGIC: &[u8] = b"BEVTRACK-CKPT-1";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                reason: format!("expected {n} bytes for {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let magic = c.take(CKPT_MAGIC.len(), "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Version {
            found: String::from_utf8_lossy(magic).into_owned(),
            expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
        });
    }
    let count = c.u32("entry count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let n = c.u32("name length")? as usize;
        let start = c.pos;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::Checkpoint(format!("non UTF-8 name at byte offset {start}")))?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32("dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last entry",
            bytes.len() - c.pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let a = Tensor::new(vec![2, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::scalar(7.0f32);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("a", &a), ("b.c", &b)]).unwrap();
        assert!(buf.starts_with(CKPT_MAGIC));
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.c".to_string(), b)]);

        let err = read_checkpoint(&buf[..buf.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");

        let mut wrong = buf.clone();
        wrong[14] = b'9';
        assert!(matches!(read_checkpoint(&wrong[..]), Err(Error::Version { .. })));
    }
}
