//! `CEMB` embedding store.
//!
//! Little-endian throughout, no padding:
//!
//! ```text
//! header   magic "CEMB" | version u16 = 1 | dtype u8 = 1 (f32) | normalized u8 | dim u32 | count u64
//! record   id_len u16 | id (UTF-8) | patch_count u16 | (1 + patch_count) * dim f32
//! ```
//!
//! The first vector of a record is the global embedding, followed by patch
//! embeddings in crop order. Text records have `patch_count == 0`. Modality is
//! implied by the file (`texts.cemb` / `images.cemb`), not by the record.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::math::l2_norm;

pub const MAGIC: [u8; 4] = *b"CEMB";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Tolerance on `‖v‖₂ - 1` for stores flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

pub const TEXTS_FILE: &str = "texts.cemb";
pub const IMAGES_FILE: &str = "images.cemb";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}, expected \"CEMB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("corrupt record at byte offset {offset}: {reason}")]
    CorruptRecord { offset: u64, reason: String },
    #[error("vector of {id:?} has norm {norm} but the store is flagged normalized")]
    NormalizationViolation { id: String, norm: f64 },
    #[error("record {id:?} contains a non-finite value")]
    NonFinite { id: String },
    #[error("record {id:?} has a vector of dim {got}, store dim is {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {0:?} contains a zero vector")]
    ZeroVector(String),
    #[error("id {0:?} exceeds 65535 bytes")]
    IdTooLong(String),
    #[error("record {0:?} has more than 65535 patches")]
    TooManyPatches(String),
    #[error("store dim must be at least 1")]
    ZeroDim,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub normalized: bool,
    pub dim: u32,
    pub count: u64,
}

impl StoreHeader {
    pub fn new(dim: u32, normalized: bool) -> Self {
        Self { normalized, dim, count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub global: Vec<f32>,
    pub patches: Vec<Vec<f32>>,
}

impl EmbeddingRecord {
    pub fn text(id: impl Into<String>, global: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            global,
            patches: Vec::new(),
        }
    }

    pub fn image(id: impl Into<String>, global: Vec<f32>, patches: Vec<Vec<f32>>) -> Self {
        Self {
            id: id.into(),
            global,
            patches,
        }
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        std::iter::once(self.global.as_slice()).chain(self.patches.iter().map(Vec::as_slice))
    }

    fn encoded_len(&self, dim: usize) -> usize {
        2 + self.id.len() + 2 + (1 + self.patches.len()) * dim * 4
    }
}

/// Byte size of a store with the given records, without encoding it.
pub fn encoded_size(records: &[EmbeddingRecord], dim: usize) -> usize {
    HEADER_LEN + records.iter().map(|r| r.encoded_len(dim)).sum::<usize>()
}

fn validate(records: &[EmbeddingRecord], dim: usize, normalized: bool) -> Result<()> {
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let mut seen = HashMap::with_capacity(records.len());
    for r in records {
        if r.id.len() > u16::MAX as usize {
            return Err(StoreError::IdTooLong(r.id.clone()));
        }
        if r.patches.len() > u16::MAX as usize {
            return Err(StoreError::TooManyPatches(r.id.clone()));
        }
        if seen.insert(r.id.as_str(), ()).is_some() {
            return Err(StoreError::DuplicateId(r.id.clone()));
        }
        for v in r.vectors() {
            if v.len() != dim {
                return Err(StoreError::DimMismatch {
                    id: r.id.clone(),
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { id: r.id.clone() });
            }
            if normalized {
                let norm = l2_norm(v);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NormalizationViolation { id: r.id.clone(), norm });
                }
            }
        }
    }
    Ok(())
}

/// Serialize records into a complete store image. `header.count` is ignored
/// and recomputed from `records`.
pub fn encode(records: &[EmbeddingRecord], header: StoreHeader) -> Result<Vec<u8>> {
    let dim = header.dim as usize;
    validate(records, dim, header.normalized)?;
    let mut out = Vec::with_capacity(encoded_size(records, dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(header.normalized as u8);
    out.extend_from_slice(&header.dim.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.extend_from_slice(&(r.patches.len() as u16).to_le_bytes());
        for v in r.vectors() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record_start: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(StoreError::CorruptRecord {
                offset: record_start as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, record_start: usize, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, record_start, what)?.try_into().unwrap()))
    }
}

/// Parse and validate a store image.
pub fn decode(bytes: &[u8]) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    if bytes.len() < 4 {
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        return Err(StoreError::BadMagic(m));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::CorruptRecord {
            offset: 0,
            reason: "truncated header".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(bytes[6]));
    }
    let normalized = match bytes[7] {
        0 => false,
        1 => true,
        other => {
            return Err(StoreError::CorruptRecord {
                offset: 7,
                reason: format!("normalized flag must be 0 or 1, got {other}"),
            })
        }
    };
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let header = StoreHeader { normalized, dim, count };

    let d = dim as usize;
    let mut cur = Cursor { bytes, pos: HEADER_LEN };
    // Each record needs at least 4 + 4*dim bytes; don't trust `count` for allocation.
    let min_record = 4 + 4 * d;
    let mut records = Vec::with_capacity((count as usize).min((bytes.len() - HEADER_LEN) / min_record));
    let mut seen = HashMap::new();
    for _ in 0..count {
        let start = cur.pos;
        let id_len = cur.u16(start, "id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, start, "id")?)
            .map_err(|_| StoreError::CorruptRecord {
                offset: start as u64,
                reason: "id is not valid UTF-8".into(),
            })?
            .to_owned();
        let patch_count = cur.u16(start, "patch count")? as usize;
        let raw = cur.take((1 + patch_count) * d * 4, start, "vectors")?;
        let mut vectors = raw.chunks_exact(d * 4).map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect::<Vec<f32>>()
        });
        let global = vectors.next().unwrap();
        let record = EmbeddingRecord {
            id,
            global,
            patches: vectors.collect(),
        };
        for v in record.vectors() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { id: record.id.clone() });
            }
            if normalized {
                let norm = l2_norm(v);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NormalizationViolation {
                        id: record.id.clone(),
                        norm,
                    });
                }
            }
        }
        if seen.insert(record.id.clone(), ()).is_some() {
            return Err(StoreError::DuplicateId(record.id));
        }
        records.push(record);
    }
    if cur.pos != bytes.len() {
        return Err(StoreError::CorruptRecord {
            offset: cur.pos as u64,
            reason: format!("{} trailing bytes after {count} records", bytes.len() - cur.pos),
        });
    }
    Ok((header, records))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a store atomically and return the number of bytes written.
pub fn write_store(records: &[EmbeddingRecord], header: StoreHeader, path: &Path) -> Result<u64> {
    let bytes = encode(records, header)?;
    write_atomic(path, &bytes).map_err(io_err(path))?;
    Ok(bytes.len() as u64)
}

pub fn read_store(path: &Path) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

/// A loaded, immutable store with id lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    header: StoreHeader,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(records: Vec<EmbeddingRecord>, dim: usize, normalized: bool) -> Result<Self> {
        validate(&records, dim, normalized)?;
        let by_id = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Self {
            header: StoreHeader {
                normalized,
                dim: dim as u32,
                count: records.len() as u64,
            },
            records,
            by_id,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let (header, records) = read_store(path)?;
        Self::new(records, header.dim as usize, header.normalized)
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        write_store(&self.records, self.header, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.records, self.header).expect("a constructed store is always valid")
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index_of(id).map(|i| &self.records[i])
    }

    /// Sub-store holding only `ids`, in the given order. Unknown ids are skipped.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let records = ids.into_iter().filter_map(|id| self.get(id).cloned()).collect();
        Self::new(records, self.dim(), self.header.normalized).expect("subset of a valid store")
    }

    /// Every vector scaled to unit L2 norm; the result is flagged normalized.
    pub fn l2_normalized(&self) -> Result<Self> {
        let unit = |id: &str, v: &[f32]| -> Result<Vec<f32>> {
            let norm = l2_norm(v);
            if norm == 0.0 {
                return Err(StoreError::ZeroVector(id.to_owned()));
            }
            Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
        };
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(EmbeddingRecord {
                    id: r.id.clone(),
                    global: unit(&r.id, &r.global)?,
                    patches: r.patches.iter().map(|p| unit(&r.id, p)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, self.dim(), true)
    }
}

/// Read `in_path`, L2-normalize every vector and write the result to `out_path`.
pub fn l2_normalize_store(in_path: &Path, out_path: &Path) -> Result<EmbeddingStore> {
    let normalized = EmbeddingStore::open(in_path)?.l2_normalized()?;
    normalized.save(out_path)?;
    Ok(normalized)
}
