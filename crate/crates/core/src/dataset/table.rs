//! Id-keyed vector tables and the ZSLF binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ZSLF" | u32 version=1 | u32 record_count | u32 dim
//! record_count × ( u16 id_len | id bytes (UTF-8) | dim × f32 )
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const ZSLF_MAGIC: &[u8; 4] = b"ZSLF";
pub const ZSLF_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// An ordered table of `(id, vector)` records sharing one dimensionality.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("table dim must be positive".into()));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn with_capacity(dim: usize, records: usize) -> Result<Self> {
        let mut table = Self::new(dim)?;
        table.ids.reserve(records);
        table.data.reserve(records * dim);
        table.index.reserve(records);
        Ok(table)
    }

    pub fn from_records<I, S, V>(dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: AsRef<[f32]>,
    {
        let mut table = Self::new(dim)?;
        for (id, v) in records {
            table.push(id, v.as_ref())?;
        }
        Ok(table)
    }

    /// Appends a record. Fails on a dimension mismatch or a duplicate id.
    pub fn push(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "record '{id}' has {} components, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate id '{id}'")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// Serializes the table into ZSLF bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.len())
            .map_err(|_| Error::Validation("too many records for ZSLF".into()))?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::Validation("dim too large for ZSLF".into()))?;
        let id_bytes: usize = self.ids.iter().map(String::len).sum();
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.len() * 2 + id_bytes + self.data.len() * 4);
        out.extend_from_slice(ZSLF_MAGIC);
        out.extend_from_slice(&ZSLF_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for (id, v) in self.iter() {
            let len = u16::try_from(id.len()).map_err(|_| {
                Error::Validation(format!("id longer than {} bytes: '{id}'", u16::MAX))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses ZSLF bytes. The whole buffer must be consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != ZSLF_MAGIC {
                return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
            }
            return Err(Error::Corrupt(format!(
                "header needs {HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != ZSLF_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32()?;
        if version != ZSLF_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        // Cap the reservation by what the buffer could possibly hold.
        let plausible = count.min(bytes.len() / (2 + 4 * dim.max(1)) + 1);
        let mut table = Self::with_capacity(dim, plausible)?;
        let mut vector = vec![0f32; dim];
        for r in 0..count {
            let id_len = cur.u16()? as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|e| Error::Corrupt(format!("record {r}: id is not UTF-8: {e}")))?
                .to_owned();
            let raw = cur.take(dim * 4)?;
            for (dst, chunk) in vector.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            table.push(id, &vector)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - cur.pos
            )));
        }
        Ok(table)
    }
}

/// Bitwise equality: ids, dim, and the exact bit patterns of every component.
impl PartialEq for FeatureTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.data.len() == other.data.len()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "truncated payload: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let bytes = fs::read(path.as_ref())?;
    FeatureTable::from_bytes(&bytes)
}

pub fn write_feature_file(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let bytes = table.to_bytes()?;
    fs::write(path.as_ref(), bytes)?;
    Ok(())
}

/// Label-keyed semantic class vectors. Stored as a [`FeatureTable`] whose ids
/// are class labels, so the same ZSLF file format applies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVectorSet(FeatureTable);

impl ClassVectorSet {
    pub fn new(table: FeatureTable) -> Self {
        Self(table)
    }

    pub fn from_records<I, S, V>(dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: AsRef<[f32]>,
    {
        FeatureTable::from_records(dim, records).map(Self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_feature_file(path).map(Self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_feature_file(&self.0, path)
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        self.0.ids()
    }

    pub fn get(&self, label: &str) -> Option<&[f32]> {
        self.0.get(label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.0.iter()
    }

    pub fn table(&self) -> &FeatureTable {
        &self.0
    }

    /// Keeps only the given labels, in the given order.
    pub fn subset<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        let mut out = FeatureTable::with_capacity(self.dim(), labels.len())?;
        for label in labels {
            let label = label.as_ref();
            let v = self
                .get(label)
                .ok_or_else(|| Error::arg(format!("no class vector for '{label}'")))?;
            out.push(label, v)?;
        }
        Ok(Self(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: &[u8; 4], version: u32, count: u32, dim: u32) -> Vec<u8> {
        let mut b = magic.to_vec();
        b.extend_from_slice(&version.to_le_bytes());
        b.extend_from_slice(&count.to_le_bytes());
        b.extend_from_slice(&dim.to_le_bytes());
        b
    }

    fn record(b: &mut Vec<u8>, id: &str, v: &[f32]) {
        b.extend_from_slice(&(id.len() as u16).to_le_bytes());
        b.extend_from_slice(id.as_bytes());
        for x in v {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }

    #[test]
    fn empty_file() {
        let t = FeatureTable::from_bytes(&header(b"ZSLF", 1, 0, 4096)).unwrap();
        assert_eq!(t.dim(), 4096);
        assert!(t.is_empty());
    }

    #[test]
    fn hand_built_two_records() {
        let mut b = header(b"ZSLF", 1, 2, 3);
        record(&mut b, "a", &[1.0, 2.0, 3.0]);
        record(&mut b, "bb", &[4.0, 5.0, 6.0]);
        let t = FeatureTable::from_bytes(&b).unwrap();
        assert_eq!(t.ids(), ["a", "bb"]);
        assert_eq!(t.row(0), [1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), [4.0, 5.0, 6.0]);
        assert_eq!(t.to_bytes().unwrap(), b);
    }

    #[test]
    fn bad_magic_and_version() {
        let err = FeatureTable::from_bytes(&header(b"XXXX", 1, 0, 3)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let err = FeatureTable::from_bytes(&header(b"ZSLF", 2, 0, 3)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let err = FeatureTable::from_bytes(b"XXXX").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut b = header(b"ZSLF", 1, 2, 3);
        record(&mut b, "a", &[1.0, 2.0, 3.0]);
        record(&mut b, "b", &[4.0, 5.0, 6.0]);
        for cut in [b.len() - 1, b.len() - 12, 17, 10] {
            let err = FeatureTable::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
        }
        b.push(0);
        assert!(matches!(
            FeatureTable::from_bytes(&b).unwrap_err(),
            Error::Corrupt(_)
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut b = header(b"ZSLF", 1, 2, 1);
        record(&mut b, "a", &[1.0]);
        record(&mut b, "a", &[2.0]);
        assert!(matches!(
            FeatureTable::from_bytes(&b).unwrap_err(),
            Error::Validation(_)
        ));
        let mut t = FeatureTable::new(1).unwrap();
        t.push("a", &[1.0]).unwrap();
        assert!(matches!(t.push("a", &[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_dim_and_wrong_length() {
        assert!(matches!(
            FeatureTable::from_bytes(&header(b"ZSLF", 1, 0, 0)).unwrap_err(),
            Error::Validation(_)
        ));
        let mut t = FeatureTable::new(2).unwrap();
        assert!(t.push("a", &[1.0]).is_err());
    }

    #[test]
    fn oversized_id_rejected_on_write() {
        let mut t = FeatureTable::new(1).unwrap();
        t.push("x".repeat(70_000), &[0.0]).unwrap();
        assert!(matches!(t.to_bytes(), Err(Error::Validation(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.zslf");
        let t =
            FeatureTable::from_records(2, [("α", [f32::NAN, -0.0]), ("b", [1e-40, 3.5])]).unwrap();
        write_feature_file(&t, &path).unwrap();
        assert_eq!(load_feature_file(&path).unwrap(), t);
        let missing = dir.path().join("nope").join("t.zslf");
        assert!(matches!(write_feature_file(&t, missing), Err(Error::Io(_))));
    }

    #[test]
    fn class_vector_subset() {
        let cv =
            ClassVectorSet::from_records(1, [("a", [1.0]), ("b", [2.0]), ("c", [3.0])]).unwrap();
        let s = cv.subset(&["c", "a"]).unwrap();
        assert_eq!(s.labels(), ["c", "a"]);
        assert_eq!(s.get("c"), Some(&[3.0][..]));
        assert!(cv.subset(&["z"]).is_err());
    }
}
