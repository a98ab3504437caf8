//! Binary parameter files.
//!
//! Layout (little-endian): magic `UKPF`, `u32` format version, then one
//! record per tensor: `u16` name length, UTF-8 name, `u8` rank, `rank` x
//! `u32` dims, row-major `f32` payload. Records run to end of file.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UKPF";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(8 + store.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for '{name}'")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension too large in '{name}'")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let mut store = ParamStore::new();
    while r.pos < buf.len() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{name}' is too large"))
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Writes via a temporary sibling and renames, so readers never see partial files.
pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(store)?)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_record_layout() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let b = encode(&s).unwrap();
        assert_eq!(&b[..4], b"UKPF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..10], &1u16.to_le_bytes());
        assert_eq!(b[10], b'w');
        assert_eq!(b[11], 2);
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
        assert_eq!(decode(&b).unwrap(), s);
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let mut b = encode(&ParamStore::new()).unwrap();
        b[4] = 9;
        assert!(decode(&b).unwrap_err().to_string().contains("version 9"));
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let b = encode(&s).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
    }
}
