//! Named float32 tensor container and its CTW1 on-disk encoding.
//!
//! CTW1 layout (little-endian):
//!
//! ```text
//! "CTW1"                      magic
//! u32                         entry count
//! per entry:
//!   u16                       name length in bytes
//!   [u8]                      UTF-8 name
//!   u8                        rank
//!   rank x u32                dims
//!   prod(dims) x f32          row-major payload
//! u32                         CRC32 of every byte after the magic
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CTW1_MAGIC: &[u8; 4] = b"CTW1";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "entry {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(WeightEntry { name, shape, data })
    }
}

/// Ordered weight entries with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn new(entries: Vec<WeightEntry>) -> Result<Self> {
        let mut names = HashSet::new();
        for e in &entries {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate weight entry {}", e.name)));
            }
        }
        Ok(WeightStore { entries })
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Bytes of the CTW1 encoding of this store.
    pub fn encoded_len(&self) -> usize {
        8 + self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() + 1 + 4 * e.shape.len() + 4 * e.data.len())
            .sum::<usize>()
            + 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(CTW1_MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Shape("too many weight entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name_len =
                u16::try_from(e.name.len()).map_err(|_| Error::Shape(format!("entry name {} too long", e.name)))?;
            let rank =
                u8::try_from(e.shape.len()).map_err(|_| Error::Shape(format!("entry {} rank too large", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(rank);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| Error::Shape(format!("entry {} dim {d} exceeds u32", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != CTW1_MAGIC {
            return Err(fmt(0, "unknown magic, expected \"CTW1\""));
        }
        if bytes.len() < 12 {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[4..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut pos = 4;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= body_end)
                .ok_or_else(|| fmt(*pos, "truncated entry"))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name_at = pos;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| fmt(name_at, "entry name is not UTF-8"))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let payload_at = pos;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| fmt(payload_at, "shape overflow"))?;
            let data = take(&mut pos, n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(WeightEntry { name, shape, data });
        }
        if pos != body_end {
            return Err(fmt(pos, "trailing bytes before checksum"));
        }
        WeightStore::new(entries)
    }

    /// CRC32 of the encoded payload (everything after the magic).
    pub fn checksum(&self) -> Result<u32> {
        let bytes = self.to_bytes()?;
        Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_entries() -> WeightStore {
        WeightStore::new(vec![
            WeightEntry::new(
                "conv.kernel",
                vec![2, 1, 3, 3],
                (0..18).map(|i| i as f32 * 0.5).collect(),
            )
            .unwrap(),
            WeightEntry::new("conv.bias", vec![2], vec![-0.0, f32::MIN_POSITIVE / 2.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = two_entries();
        let bytes = store.to_bytes().unwrap();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.entries()[1].data[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn encoded_size_formula() {
        let store = two_entries();
        // header 8, per entry 2 + name + 1 + 4 * rank + 4 * n, trailer 4
        let expected = 8 + (2 + 11 + 1 + 16 + 72) + (2 + 9 + 1 + 4 + 8) + 4;
        assert_eq!(store.to_bytes().unwrap().len(), expected);
        assert_eq!(store.encoded_len(), expected);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = two_entries().to_bytes().unwrap();
        let at = bytes.len() - 10;
        bytes[at] ^= 0x40;
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_magic_and_duplicates() {
        let mut bytes = two_entries().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            WeightStore::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let e = WeightEntry::new("a", vec![1], vec![0.0]).unwrap();
        assert!(WeightStore::new(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn shape_overflow_is_format_error() {
        let mut body = Vec::new();
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&1u16.to_le_bytes());
        body.push(b'a');
        body.push(3);
        for _ in 0..3 {
            body.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let mut bytes = CTW1_MAGIC.to_vec();
        bytes.extend_from_slice(&body);
        bytes.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
