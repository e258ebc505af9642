//! Binary store of precomputed chunk vectors.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "D2SE" | version: u16 = 1 | h: u32 | count: u64
//! count × ( id_len: u16 | id: [u8; id_len] (UTF-8) | chunk_index: u16 | h × f32 )
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const STORE_MAGIC: &[u8; 4] = b"D2SE";
pub const STORE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding store at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("vector for {doc_id:?} chunk {chunk} has length {got}, store width is {h}")]
    WidthMismatch { doc_id: String, chunk: usize, got: usize, h: usize },
    #[error("duplicate record for {doc_id:?} chunk {chunk}")]
    Duplicate { doc_id: String, chunk: usize },
    #[error("record key out of range: {0}")]
    KeyRange(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Record {
    doc_id: String,
    chunk: u16,
    vector: Vec<f32>,
}

/// `(doc_id, chunk_index) → h`-vector, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    h: usize,
    records: Vec<Record>,
    index: HashMap<String, HashMap<u16, usize>>,
}

impl EmbeddingStore {
    pub fn new(h: usize) -> Self {
        EmbeddingStore { h, records: Vec::new(), index: HashMap::new() }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, doc_id: &str, chunk: usize, vector: Vec<f32>) -> Result<(), StoreError> {
        if vector.len() != self.h {
            return Err(StoreError::WidthMismatch { doc_id: doc_id.into(), chunk, got: vector.len(), h: self.h });
        }
        let chunk16 = u16::try_from(chunk).map_err(|_| StoreError::KeyRange(format!("chunk index {chunk}")))?;
        if doc_id.len() > usize::from(u16::MAX) {
            return Err(StoreError::KeyRange(format!("doc id of {} bytes", doc_id.len())));
        }
        let slot = self.index.entry(doc_id.to_owned()).or_default();
        if slot.contains_key(&chunk16) {
            return Err(StoreError::Duplicate { doc_id: doc_id.into(), chunk });
        }
        slot.insert(chunk16, self.records.len());
        self.records.push(Record { doc_id: doc_id.to_owned(), chunk: chunk16, vector });
        Ok(())
    }

    pub fn get(&self, doc_id: &str, chunk: usize) -> Option<&[f32]> {
        let chunk = u16::try_from(chunk).ok()?;
        let idx = *self.index.get(doc_id)?.get(&chunk)?;
        Some(&self.records[idx].vector)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &[f32])> {
        self.records.iter().map(|r| (r.doc_id.as_str(), usize::from(r.chunk), r.vector.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (8 + 4 * self.h));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.doc_id.len() as u16).to_le_bytes());
            out.extend_from_slice(r.doc_id.as_bytes());
            out.extend_from_slice(&r.chunk.to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != STORE_MAGIC {
            return Err(StoreError::Format { offset: 0, message: format!("bad magic {magic:?}") });
        }
        let version_at = cur.pos;
        let version = cur.u16("version")?;
        if version != STORE_VERSION {
            return Err(StoreError::Format { offset: version_at, message: format!("unsupported version {version}") });
        }
        let h = cur.u32("width")? as usize;
        let count_at = cur.pos;
        let count = cur.u64("record count")?;
        let mut store = EmbeddingStore::new(h);
        for _ in 0..count {
            let record_at = cur.pos;
            let id_len = usize::from(cur.u16("doc id length")?);
            let id_at = cur.pos;
            let id = std::str::from_utf8(cur.take(id_len, "doc id")?)
                .map_err(|e| StoreError::Format { offset: id_at, message: format!("doc id is not UTF-8: {e}") })?
                .to_owned();
            let chunk = usize::from(cur.u16("chunk index")?);
            let raw = cur.take(4 * h, "vector")?;
            let vector = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            store.insert(&id, chunk, vector).map_err(|e| StoreError::Format { offset: record_at, message: e.to_string() })?;
        }
        if cur.pos != bytes.len() {
            return Err(StoreError::Format {
                offset: cur.pos,
                message: format!("{} trailing bytes after {count} records (count field at {count_at})", bytes.len() - cur.pos),
            });
        }
        Ok(store)
    }

    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.to_owned(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        fs::write(path, self.to_bytes()).map_err(|source| StoreError::Io { path: path.to_owned(), source })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| StoreError::Format {
            offset: self.pos,
            message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
