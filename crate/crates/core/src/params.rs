//! Named parameter snapshots and the binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FCIL" | version: u32 | entry count: u32
//! per entry: name length: u32 | name bytes (UTF-8) | rank: u32 | dims: u64 × rank | f64 × Π dims
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCIL";
pub const SCHEMA_VERSION: u32 = 1;

/// Entry carrying the class label of every class-indexed row.
pub const CLASSES_ENTRY: &str = "meta.classes";

/// Entries whose first axis is indexed by class (row `i` belongs to `classes[i]`).
pub fn is_class_indexed(name: &str) -> bool {
    matches!(name, "cls.w" | "cls.b" | "gen.cond")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone())
    }
}

/// Ordered, uniquely-named parameter snapshot; the only thing exchanged
/// between clients and the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub schema_version: u32,
    entries: Vec<ParamEntry>,
}

impl ParameterVector {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Contract(format!("duplicate entry {}", e.name)));
            }
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Dimension(format!(
                    "entry {} shape {:?} holds {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            entries,
        })
    }

    pub fn from_map(map: &BTreeMap<String, Tensor>) -> Self {
        let entries = map
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            entries,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.to_tensor()))
            .collect()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class labels carried by the snapshot, if any.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.get(CLASSES_ENTRY)
            .map(|e| e.data.iter().map(|&v| v as usize).collect())
    }

    /// Keeps only entries whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            schema_version: self.schema_version,
            entries: self
                .entries
                .iter()
                .filter(|e| keep(&e.name))
                .cloned()
                .collect(),
        }
    }

    /// Same names and shapes, except class-indexed entries may differ in row count.
    pub fn is_aggregation_compatible(&self, other: &Self) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().all(|a| {
            let Some(b) = other.get(&a.name) else {
                return false;
            };
            if a.name == CLASSES_ENTRY || is_class_indexed(&a.name) {
                a.shape.len() == b.shape.len() && a.shape[1..] == b.shape[1..]
            } else {
                a.shape == b.shape
            }
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.schema_version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push(ParamEntry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Self::new(entries)
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(name: &str, shape: Vec<usize>) -> ParamEntry {
        let n = shape.iter().product();
        ParamEntry {
            name: name.into(),
            shape,
            data: (0..n).map(|i| i as f64 * 0.5 - 1.0).collect(),
        }
    }

    #[test]
    fn header_layout() {
        let pv = ParameterVector::new(vec![entry("a", vec![2])]).unwrap();
        let bytes = pv.to_bytes();
        assert_eq!(&bytes[..4], b"FCIL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn rejects_duplicates_and_corruption() {
        assert!(ParameterVector::new(vec![entry("a", vec![1]), entry("a", vec![1])]).is_err());
        let pv = ParameterVector::new(vec![entry("a", vec![2, 2])]).unwrap();
        let mut bytes = pv.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ParameterVector::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = pv.to_bytes();
        assert!(ParameterVector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn compatibility_allows_class_rows_to_differ() {
        let a = ParameterVector::new(vec![entry("cls.w", vec![2, 4]), entry("trunk.l0.w", vec![3, 4])]).unwrap();
        let b = ParameterVector::new(vec![entry("cls.w", vec![5, 4]), entry("trunk.l0.w", vec![3, 4])]).unwrap();
        let c = ParameterVector::new(vec![entry("cls.w", vec![2, 4]), entry("trunk.l0.w", vec![4, 4])]).unwrap();
        assert!(a.is_aggregation_compatible(&b));
        assert!(!a.is_aggregation_compatible(&c));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let pv = ParameterVector::new(vec![entry("x", vec![3, 2]), entry("y", vec![0])]).unwrap();
        pv.write_checkpoint(&path).unwrap();
        assert_eq!(ParameterVector::read_checkpoint(&path).unwrap(), pv);
        let missing = ParameterVector::read_checkpoint(dir.path().join("nope"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            name in "[a-z.]{1,12}",
        ) {
            let n = values.len();
            let pv = ParameterVector::new(vec![ParamEntry { name, shape: vec![n], data: values }]).unwrap();
            let back = ParameterVector::from_bytes(&pv.to_bytes()).unwrap();
            prop_assert_eq!(pv.to_bytes(), back.to_bytes());
            for (a, b) in pv.entries()[0].data.iter().zip(&back.entries()[0].data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
