//! Binary checkpoint format shared by client, server, and gate snapshots.
//!
//! Layout: magic bytes `PMMOE1`, then a little-endian u32 tensor count, then
//! per tensor: u16 name length, name bytes, u8 rank, u32 dims, f64 payload.
//! Integers and floats are little-endian; round-trips are bitwise exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 6] = b"PMMOE1";

pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.rank() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint {
                message: format!(
                    "truncated: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(f64::from_le_bytes(arr))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::BadCheckpoint {
            message: format!("bad magic {magic:?}"),
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| {
            Error::BadCheckpoint {
                message: format!("tensor name is not UTF-8: {e}"),
            }
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        entries.push((
            name,
            Tensor::new(shape, data).map_err(|e| Error::BadCheckpoint {
                message: e.to_string(),
            })?,
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::BadCheckpoint {
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

/// SHA-256 over the encoded form of a set of named tensors. Used by the
/// freeze-invariant checks: equal digests mean byte-identical parameters.
pub fn digest(entries: &[(String, &Tensor)]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(encode(entries));
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor)> {
        vec![
            (
                "fe.0.weight".to_string(),
                Tensor::matrix(2, 3, vec![1.0, -2.5, 0.0, 1e-300, 3.7, f64::MIN_POSITIVE]).unwrap(),
            ),
            ("pp".to_string(), Tensor::from_vec(vec![0.125, -0.25])),
        ]
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = encode(&refs);
        assert_eq!(&bytes[..6], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, entries);
        let refs2: Vec<(String, &Tensor)> = back.iter().map(|(n, t)| (n.clone(), t)).collect();
        assert_eq!(encode(&refs2), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut bytes = encode(&refs);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn digest_changes_with_any_bit() {
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        let d1 = digest(&refs);
        let mut tweaked = entries.clone();
        tweaked[1].1.data_mut()[0] += f64::EPSILON;
        let refs2: Vec<(String, &Tensor)> =
            tweaked.iter().map(|(n, t)| (n.clone(), t)).collect();
        assert_ne!(d1, digest(&refs2));
    }
}
