//! Binary adapter format.
//!
//! ```text
//! magic        8 bytes   "LORAADPT"
//! version      u8        1
//! entry count  u64 LE
//! per entry, in key order:
//!   key length u64 LE, key bytes (UTF-8)
//!   d, l, r    u64 LE each
//!   alpha      f64 LE
//!   B          d·r f64 LE, row-major
//!   A          r·l f64 LE, row-major
//! ```
//!
//! The encoding is canonical: decoding then re-encoding reproduces the input
//! bytes exactly.

use crate::error::{Error, Result};
use crate::lora::{AdapterPair, AdapterSet};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"LORAADPT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = MAGIC.len() + 1 + 8;

/// Fixed bytes per entry besides the key and the two payloads:
/// key length, d, l, r and alpha.
pub const ENTRY_FIXED_LEN: usize = 8 * 5;

pub fn encoded_len(adapters: &AdapterSet) -> usize {
    HEADER_LEN
        + adapters
            .iter()
            .map(|(key, pair)| ENTRY_FIXED_LEN + key.len() + 8 * pair.param_count() as usize)
            .sum::<usize>()
}

pub fn serialize_adapters(adapters: &AdapterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(adapters));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(adapters.len() as u64).to_le_bytes());
    for (key, pair) in adapters.iter() {
        out.extend_from_slice(&(key.len() as u64).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        for dim in [pair.d(), pair.l(), pair.rank()] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.extend_from_slice(&pair.alpha().to_le_bytes());
        for v in pair.b().data().iter().chain(pair.a().data()) {
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
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Malformed(format!("{what} {v} does not fit in memory")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Malformed(format!("{rows}x{cols} payload overflows")))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data)
    }
}

pub fn deserialize_adapters(bytes: &[u8]) -> Result<AdapterSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = r.u64()?;
    let mut set = AdapterSet::new();
    let mut prev_key: Option<String> = None;
    for _ in 0..count {
        let key_len = r.usize("key length")?;
        let key = std::str::from_utf8(r.take(key_len)?)
            .map_err(|e| Error::Malformed(format!("layer key is not UTF-8: {e}")))?
            .to_string();
        if prev_key.as_ref().is_some_and(|p| *p >= key) {
            return Err(Error::Malformed(format!("layer key `{key}` out of order or duplicated")));
        }
        let d = r.usize("d")?;
        let l = r.usize("l")?;
        let rank = r.usize("rank")?;
        let alpha = r.f64()?;
        let b = r.matrix(d, rank)?;
        let a = r.matrix(rank, l)?;
        let pair = AdapterPair::new(&key, b, a, alpha)?;
        set.insert(key.clone(), pair);
        prev_key = Some(key);
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(set)
}
