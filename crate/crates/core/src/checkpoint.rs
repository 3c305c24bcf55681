//! Named-tensor checkpoint files (`ICKP`).
//!
//! `"ICKP" | version u8 | count u32 | count × (name_len u16 | name utf-8 |
//! rank u8 | dims u32 × rank | f32 payload)`, little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICKP";
const VERSION: u8 = 1;

pub fn encode(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor `{name}` cannot be encoded")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { expected: self.pos + n, found: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing ICKP magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_exact_for_f32_values() {
        let mut p = ParamStore::new();
        p.insert("conv0.w", Tensor::new(vec![2, 1, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap());
        p.insert("null.cisp", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = encode(&p).unwrap();
        assert_eq!(&b[..5], b"ICKP\x01");
        assert_eq!(decode(&b).unwrap(), p);
    }

    #[test]
    fn corrupt_inputs() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros(vec![3]));
        let b = encode(&p).unwrap();
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = b;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }
}
