use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"GFE1";
pub const CONTAINER_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes {found:02x?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: String },
    #[error("unsupported version {found}, expected {expected}")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated: need {needed} bytes, found {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("no entry with id {0:?}")]
    MissingEntry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Global,
    FeatureMap,
    Tensor,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::Global => 0,
            EntryKind::FeatureMap => 1,
            EntryKind::Tensor => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, ContainerError> {
        match code {
            0 => Ok(EntryKind::Global),
            1 => Ok(EntryKind::FeatureMap),
            2 => Ok(EntryKind::Tensor),
            _ => Err(ContainerError::Malformed(format!("unknown entry kind {code}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum EntryData {
    Global(Vec<f32>),
    FeatureMap {
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    },
    Tensor {
        shape: Vec<usize>,
        values: Vec<f32>,
    },
}

impl EntryData {
    pub fn kind(&self) -> EntryKind {
        match self {
            EntryData::Global(_) => EntryKind::Global,
            EntryData::FeatureMap { .. } => EntryKind::FeatureMap,
            EntryData::Tensor { .. } => EntryKind::Tensor,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            EntryData::Global(v) => vec![v.len()],
            EntryData::FeatureMap {
                channels,
                height,
                width,
                ..
            } => vec![*channels, *height, *width],
            EntryData::Tensor { shape, .. } => shape.clone(),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            EntryData::Global(v) => v,
            EntryData::FeatureMap { values, .. } | EntryData::Tensor { values, .. } => values,
        }
    }

    fn from_parts(kind: EntryKind, shape: Vec<usize>, values: Vec<f32>) -> Self {
        match kind {
            EntryKind::Global => EntryData::Global(values),
            EntryKind::FeatureMap => EntryData::FeatureMap {
                channels: shape[0],
                height: shape[1],
                width: shape[2],
                values,
            },
            EntryKind::Tensor => EntryData::Tensor { shape, values },
        }
    }

    /// Equality on the raw bit patterns of the payload.
    pub fn bitwise_eq(&self, other: &EntryData) -> bool {
        self.kind() == other.kind()
            && self.shape() == other.shape()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub id: String,
    pub data: EntryData,
}

fn check_dims(kind: EntryKind, shape: &[usize]) -> Result<(), ContainerError> {
    let ok = match kind {
        EntryKind::Global => shape.len() == 1,
        EntryKind::FeatureMap => shape.len() == 3,
        EntryKind::Tensor => (1..=MAX_RANK).contains(&shape.len()),
    };
    if !ok {
        return Err(ContainerError::Malformed(format!(
            "{kind:?} entry with {} dims",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(ContainerError::Malformed(format!("invalid dims {shape:?}")));
    }
    Ok(())
}

/// In-memory container: ordered entries plus a JSON metadata string.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: String,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Container {
            meta: meta.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, id: impl Into<String>, data: EntryData) -> Result<()> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(Error::invalid("entry id longer than 65535 bytes"));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate entry id {id:?}")));
        }
        check_dims(data.kind(), &data.shape())?;
        let expected: usize = data.shape().iter().product();
        if expected != data.values().len() {
            return Err(Error::invalid(format!(
                "entry {id:?}: dims {:?} need {expected} values, got {}",
                data.shape(),
                data.values().len()
            )));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push(Entry { id, data });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EntryData> {
        self.index.get(id).map(|&i| &self.entries[i].data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u16).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            out.push(e.data.kind().code());
            let shape = e.data.shape();
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let len = 4 * e.data.values().len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.entries {
            for v in e.data.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut cur = Cursor::new(bytes);
        let header = read_header(&mut cur)?;
        let payload_start = cur.pos as u64;
        let needed = payload_start + header.payload_len + 4;
        if (bytes.len() as u64) < needed {
            return Err(ContainerError::Truncated {
                needed,
                available: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 > needed {
            return Err(ContainerError::Malformed(format!(
                "{} trailing bytes after checksum",
                bytes.len() as u64 - needed
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ContainerError::ChecksumMismatch { stored, computed });
        }
        let payload = &body[payload_start as usize..];
        let mut c = Container::new(header.meta);
        for rec in header.records {
            let raw = &payload[rec.offset as usize..(rec.offset + rec.length) as usize];
            let values = decode_f32(raw);
            let data = EntryData::from_parts(rec.kind, rec.shape, values);
            c.index.insert(rec.id.clone(), c.entries.len());
            c.entries.push(Entry { id: rec.id, data });
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Container::from_bytes(&bytes)?)
    }
}

pub(crate) fn decode_f32(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect()
}

struct IndexRecord {
    id: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

struct Header {
    meta: String,
    records: Vec<IndexRecord>,
    payload_len: u64,
}

/// Byte cursor that reports truncation instead of panicking.
pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated {
                needed: end as u64,
                available: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    pub(crate) fn string(&mut self, n: usize, what: &str) -> Result<String, ContainerError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ContainerError::Malformed(format!("{what} is not valid UTF-8")))
    }
}

/// Magic and version, checked before anything else.
pub(crate) fn check_preamble(
    cur: &mut Cursor<'_>,
    magic: &[u8; 4],
    version: u32,
) -> Result<(), ContainerError> {
    let avail = cur.bytes.len().min(4);
    if cur.bytes[..avail] != magic[..avail] {
        return Err(ContainerError::BadMagic {
            found: cur.bytes[..avail].to_vec(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    if avail < 4 {
        return Err(ContainerError::Truncated {
            needed: 4,
            available: avail as u64,
        });
    }
    if &cur.bytes[..4] != magic {
        return Err(ContainerError::BadMagic {
            found: cur.bytes[..avail].to_vec(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    cur.take(4)?;
    let found = cur.u32()?;
    if found != version {
        return Err(ContainerError::UnsupportedVersion {
            found,
            expected: version,
        });
    }
    Ok(())
}

fn read_header(cur: &mut Cursor<'_>) -> Result<Header, ContainerError> {
    check_preamble(cur, CONTAINER_MAGIC, CONTAINER_VERSION)?;
    let count = cur.u32()? as usize;
    let meta_len = cur.u32()? as usize;
    let meta = cur.string(meta_len, "metadata")?;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut seen = HashMap::new();
    let mut expected_offset = 0u64;
    for i in 0..count {
        let id_len = cur.u16()? as usize;
        let id = cur.string(id_len, "entry id")?;
        let kind = EntryKind::from_code(cur.u8()?)?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        check_dims(kind, &shape)?;
        let offset = cur.u64()?;
        let length = cur.u64()?;
        let elems: u64 = shape.iter().map(|&d| d as u64).product();
        if elems.checked_mul(4) != Some(length) {
            return Err(ContainerError::Malformed(format!(
                "entry {id:?}: dims {shape:?} disagree with declared length {length}"
            )));
        }
        if offset != expected_offset {
            return Err(ContainerError::Malformed(format!(
                "entry {id:?}: offset {offset}, expected {expected_offset}"
            )));
        }
        expected_offset += length;
        if seen.insert(id.clone(), i).is_some() {
            return Err(ContainerError::Malformed(format!("duplicate entry id {id:?}")));
        }
        records.push(IndexRecord {
            id,
            kind,
            shape,
            offset,
            length,
        });
    }
    let payload_len = cur.u64()?;
    if payload_len != expected_offset {
        return Err(ContainerError::Malformed(format!(
            "payload length {payload_len} disagrees with index total {expected_offset}"
        )));
    }
    Ok(Header {
        meta,
        records,
        payload_len,
    })
}

/// Anything that can resolve an image id to its stored entry.
pub trait EmbeddingSource {
    fn entry(&self, id: &str) -> Result<EntryData>;
}

impl EmbeddingSource for Container {
    fn entry(&self, id: &str) -> Result<EntryData> {
        self.get(id)
            .cloned()
            .ok_or_else(|| ContainerError::MissingEntry(id.to_string()).into())
    }
}

/// Random-access reader: parses the header and index only and seeks to
/// individual entries on demand. Use [`ContainerIndex::verify`] to validate
/// the checksum, which requires one pass over the file.
#[derive(Debug)]
pub struct ContainerIndex {
    path: PathBuf,
    meta: String,
    payload_start: u64,
    records: HashMap<String, (EntryKind, Vec<usize>, u64, u64)>,
    order: Vec<String>,
}

impl ContainerIndex {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        // Read a growing prefix until the header parses; the index is small
        // relative to the payload.
        let mut prefix_len = 4096u64.min(file_len);
        let header = loop {
            let mut buf = vec![0u8; prefix_len as usize];
            file.seek(SeekFrom::Start(0)).map_err(|e| Error::io(path, e))?;
            file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let mut cur = Cursor::new(&buf);
            match read_header(&mut cur) {
                Ok(h) => break (h, cur.pos as u64),
                Err(ContainerError::Truncated { .. }) if prefix_len < file_len => {
                    prefix_len = (prefix_len * 4).min(file_len);
                }
                Err(e) => return Err(e.into()),
            }
        };
        let (header, payload_start) = header;
        let needed = payload_start + header.payload_len + 4;
        if file_len < needed {
            return Err(ContainerError::Truncated {
                needed,
                available: file_len,
            }
            .into());
        }
        let mut records = HashMap::new();
        let mut order = Vec::new();
        for r in header.records {
            order.push(r.id.clone());
            records.insert(r.id, (r.kind, r.shape, r.offset, r.length));
        }
        Ok(ContainerIndex {
            path: path.to_path_buf(),
            meta: header.meta,
            payload_start,
            records,
            order,
        })
    }

    pub fn meta(&self) -> &str {
        &self.meta
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Full-file checksum validation.
    pub fn verify(&self) -> Result<()> {
        Container::read(&self.path).map(|_| ())
    }
}

impl EmbeddingSource for ContainerIndex {
    fn entry(&self, id: &str) -> Result<EntryData> {
        let (kind, shape, offset, length) = self
            .records
            .get(id)
            .ok_or_else(|| ContainerError::MissingEntry(id.to_string()))?;
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut reader = BufReader::new(file);
        reader
            .seek(SeekFrom::Start(self.payload_start + offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut raw = vec![0u8; *length as usize];
        reader
            .read_exact(&mut raw)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(EntryData::from_parts(*kind, shape.clone(), decode_f32(&raw)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("{\"k\":1}");
        c.push("a", EntryData::Global(vec![1.0, -2.5, f32::NAN])).unwrap();
        c.push(
            "b",
            EntryData::FeatureMap {
                channels: 2,
                height: 1,
                width: 2,
                values: vec![0.5; 4],
            },
        )
        .unwrap();
        c
    }

    #[test]
    fn empty_round_trip() {
        let c = Container::new("");
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.meta, c.meta);
        for (a, b) in c.entries().iter().zip(back.entries()) {
            assert_eq!(a.id, b.id);
            assert!(a.data.bitwise_eq(&b.data));
        }
    }

    #[test]
    fn corruption_classes_are_distinct() {
        let bytes = sample().to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bad),
            Err(ContainerError::BadMagic { .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Container::from_bytes(&bad),
            Err(ContainerError::UnsupportedVersion { found: 2, .. })
        ));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x01;
        assert!(matches!(
            Container::from_bytes(&bad),
            Err(ContainerError::ChecksumMismatch { .. })
        ));

        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ContainerError::Truncated { .. })
        ));
        assert!(matches!(
            Container::from_bytes(&bytes[..20]),
            Err(ContainerError::Truncated { .. })
        ));
    }

    #[test]
    fn dims_must_agree_with_payload() {
        let mut c = Container::new("");
        assert!(c
            .push(
                "x",
                EntryData::FeatureMap {
                    channels: 2,
                    height: 2,
                    width: 2,
                    values: vec![0.0; 7],
                },
            )
            .is_err());
        assert!(c.push("x", EntryData::Global(vec![1.0])).is_ok());
        assert!(c.push("x", EntryData::Global(vec![1.0])).is_err());
    }

    #[test]
    fn index_rejects_declared_size_mismatch() {
        let mut bytes = sample().to_bytes();
        // "a" index record: after magic(4) version(4) count(4) meta_len(4) meta(7)
        // id_len(2) id(1) kind(1) rank(1) -> dim u32 at 28
        let dim_at = 4 + 4 + 4 + 4 + 7 + 2 + 1 + 1 + 1;
        assert_eq!(u32::from_le_bytes(bytes[dim_at..dim_at + 4].try_into().unwrap()), 3);
        bytes[dim_at] = 4;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(ContainerError::Malformed(_))
        ));
    }

    #[test]
    fn random_access_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gfe");
        sample().write(&path).unwrap();
        let idx = ContainerIndex::open(&path).unwrap();
        idx.verify().unwrap();
        assert_eq!(idx.ids(), &["a".to_string(), "b".to_string()]);
        let b = idx.entry("b").unwrap();
        assert_eq!(b.shape(), vec![2, 1, 2]);
        assert!(matches!(
            idx.entry("zzz"),
            Err(Error::Container(ContainerError::MissingEntry(_)))
        ));
    }
}
