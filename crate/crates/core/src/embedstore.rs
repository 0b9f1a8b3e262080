//! Embedding and caption files.
//!
//! Embedding files (`PAEB`) are little-endian binary:
//!
//! ```text
//! magic   b"PAEB"
//! version u16        (currently 1)
//! modality u8        0 = audio, 1 = text
//! dim     u32
//! count   u64
//! count × { id_len u32, id UTF-8 bytes, dim × f32 }
//! ```
//!
//! Caption files are line-delimited JSON [`CaptionRecord`]s.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, EMBED_DIM};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::synthworld::{TextEncoder, TokenId, Vocab, WorldError};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PAEB";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {found:?}, expected \"PAEB\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown modality tag {0}")]
    BadModality(u8),
    #[error("file truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("{trailing} trailing bytes after last record at offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
    #[error("record id at byte offset {offset} is not valid UTF-8")]
    InvalidUtf8 { offset: usize },
    #[error("non-finite value in record `{id}` at component {index}")]
    NonFinite { id: String, index: usize },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}` has dimension {found}, file dimension is {expected}")]
    DimMismatch { id: String, expected: usize, found: usize },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("caption record {line}: {message}")]
    InvalidCaption { line: usize, message: String },
    #[error("captions reference sample ids missing from the audio file: {}", .0.join(", "))]
    MissingAudio(Vec<String>),
    #[error("text encoding failed: {0}")]
    Encode(#[from] WorldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

impl Modality {
    fn tag(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Text => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub modality: Modality,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn new(modality: Modality, records: Vec<EmbeddingRecord>) -> Self {
        let dim = records.first().map_or(EMBED_DIM, |r| r.embedding.dim());
        Self { modality, dim, records }
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.records.iter().find(|r| r.id == id).map(|r| &r.embedding)
    }

    fn validate(&self) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.embedding.dim() != self.dim {
                return Err(StoreError::DimMismatch { id: r.id.clone(), expected: self.dim, found: r.embedding.dim() });
            }
            if let Some(index) = r.embedding.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite { id: r.id.clone(), index });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(StoreError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }
}

pub fn encode_embeddings(file: &EmbeddingFile) -> Result<Vec<u8>, StoreError> {
    file.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + file.records.len() * (8 + 4 * file.dim));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.push(file.modality.tag());
    out.extend_from_slice(&(file.dim as u32).to_le_bytes());
    out.extend_from_slice(&(file.records.len() as u64).to_le_bytes());
    for r in &file.records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        for v in r.embedding.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(StoreError::Truncated { offset: self.bytes.len(), needed: n - remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates an embedding file image. Invariant violations are
/// reported, never repaired.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile, StoreError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| StoreError::BadMagic { found: bytes.to_vec() })?;
    if magic != EMBEDDING_MAGIC {
        return Err(StoreError::BadMagic { found: magic.to_vec() });
    }
    let version = c.u16()?;
    if version != EMBEDDING_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let modality = match c.take(1)?[0] {
        0 => Modality::Audio,
        1 => Modality::Text,
        t => return Err(StoreError::BadModality(t)),
    };
    let dim = c.u32()? as usize;
    let count = c.u64()?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id_offset = c.pos;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|_| StoreError::InvalidUtf8 { offset: id_offset })?
            .to_string();
        let payload = c.take(4 * dim)?;
        let values: Vec<f32> =
            payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { id, index });
        }
        if !seen.insert(id.clone()) {
            return Err(StoreError::DuplicateId(id));
        }
        records.push(EmbeddingRecord { id, embedding: Embedding::new(values) });
    }
    if c.pos != bytes.len() {
        return Err(StoreError::TrailingBytes { offset: c.pos, trailing: bytes.len() - c.pos });
    }
    Ok(EmbeddingFile { modality, dim, records })
}

/// Writes `file` to `path` and returns the number of records written.
pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<usize, StoreError> {
    let bytes = encode_embeddings(file)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: path.into(), source })?;
    }
    fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.into(), source })?;
    Ok(file.records.len())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
    decode_embeddings(&bytes)
}

/// Where a caption came from. The declaration order is the join order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Reference,
    Greedy,
    Topk,
    Sampled,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub caption_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<TokenId>>,
    pub source: CaptionSource,
}

impl CaptionRecord {
    pub fn from_tokens(sample_id: &str, tokens: &[TokenId], vocab: &Vocab, source: CaptionSource) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            caption_text: vocab.decode(tokens),
            token_ids: Some(tokens.to_vec()),
            source,
        }
    }
}

fn validate_captions(records: &[CaptionRecord], vocab: Option<&Vocab>) -> Result<(), StoreError> {
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.sample_id.is_empty() {
            return Err(StoreError::InvalidCaption { line, message: "empty sample_id".into() });
        }
        if let (Some(ids), Some(vocab)) = (&r.token_ids, vocab) {
            vocab.check_ids(ids).map_err(|e| StoreError::InvalidCaption { line, message: e.to_string() })?;
            let decoded = vocab.decode(ids);
            if decoded != r.caption_text {
                return Err(StoreError::InvalidCaption {
                    line,
                    message: format!("token_ids decode to `{decoded}`, caption_text is `{}`", r.caption_text),
                });
            }
        }
    }
    Ok(())
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<(), StoreError> {
    validate_captions(records, None)?;
    Ok(write_jsonl(path, records)?)
}

/// Reads a caption file; with a vocabulary, `token_ids` are checked against
/// `caption_text`.
pub fn read_captions(path: &Path, vocab: Option<&Vocab>) -> Result<Vec<CaptionRecord>, StoreError> {
    let records: Vec<CaptionRecord> = read_jsonl(path)?;
    validate_captions(&records, vocab)?;
    Ok(records)
}

/// An audio embedding joined with one of its captions.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedPair {
    pub sample_id: String,
    pub source: CaptionSource,
    pub caption_text: String,
    pub audio: Embedding,
    pub text: Embedding,
}

/// Joins captions to their audio embeddings, ordered by `(sample_id, source)`
/// and otherwise by input order.
///
/// Text embeddings are looked up in `text_cache` by caption text; misses are
/// computed with `encoder`.
pub fn join_pairs(
    audio: &EmbeddingFile,
    captions: &[CaptionRecord],
    text_cache: Option<&EmbeddingFile>,
    encoder: &dyn TextEncoder,
) -> Result<Vec<JoinedPair>, StoreError> {
    let audio_index: HashMap<&str, &Embedding> = audio.records.iter().map(|r| (r.id.as_str(), &r.embedding)).collect();
    let mut missing: Vec<String> = captions
        .iter()
        .filter(|c| !audio_index.contains_key(c.sample_id.as_str()))
        .map(|c| c.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(StoreError::MissingAudio(missing));
    }
    let cache: HashMap<&str, &Embedding> =
        text_cache.map(|f| f.records.iter().map(|r| (r.id.as_str(), &r.embedding)).collect()).unwrap_or_default();

    let mut order: Vec<&CaptionRecord> = captions.iter().collect();
    order.sort_by(|a, b| (&a.sample_id, a.source).cmp(&(&b.sample_id, b.source)));
    order
        .into_iter()
        .map(|c| {
            let text = match cache.get(c.caption_text.as_str()) {
                Some(e) => (*e).clone(),
                None => encoder.encode(&c.caption_text)?,
            };
            Ok(JoinedPair {
                sample_id: c.sample_id.clone(),
                source: c.source,
                caption_text: c.caption_text.clone(),
                audio: audio_index[c.sample_id.as_str()].clone(),
                text,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, base: f32, dim: usize) -> EmbeddingRecord {
        EmbeddingRecord { id: id.into(), embedding: Embedding::new((0..dim).map(|i| base + i as f32 * 0.5).collect()) }
    }

    #[test]
    fn roundtrip_three_records() {
        let file = EmbeddingFile::new(Modality::Audio, vec![rec("a", 0.1, 4), rec("bé", -2.0, 4), rec("c", 1e-30, 4)]);
        let bytes = encode_embeddings(&file).unwrap();
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(encode_embeddings(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_file_is_valid() {
        let file = EmbeddingFile::new(Modality::Text, vec![]);
        let bytes = encode_embeddings(&file).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_embeddings(&bytes).unwrap();
        assert!(back.records.is_empty());
        assert_eq!(back.dim, EMBED_DIM);
    }

    #[test]
    fn truncation_reports_offset() {
        let file = EmbeddingFile::new(Modality::Audio, vec![rec("a", 0.0, 3), rec("b", 1.0, 3)]);
        let bytes = encode_embeddings(&file).unwrap();
        // header 19 + record "a" (4 + 1 + 12 = 17) + id_len of "b" (4) + "b" (1) + 5 payload bytes
        let cut = HEADER_LEN + 17 + 4 + 1 + 5;
        match decode_embeddings(&bytes[..cut]) {
            Err(StoreError::Truncated { offset, needed }) => {
                assert_eq!(offset, cut);
                assert_eq!(needed, 12 - 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distinct_errors_for_bad_inputs() {
        let good = encode_embeddings(&EmbeddingFile::new(Modality::Audio, vec![rec("a", 0.0, 2)])).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_embeddings(&bad_magic), Err(StoreError::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_embeddings(&bad_version), Err(StoreError::UnsupportedVersion(9))));

        let mut nan = good.clone();
        let at = good.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embeddings(&nan), Err(StoreError::NonFinite { index: 1, .. })));

        let dup =
            EmbeddingFile { modality: Modality::Audio, dim: 2, records: vec![rec("a", 0.0, 2), rec("a", 1.0, 2)] };
        assert!(matches!(encode_embeddings(&dup), Err(StoreError::DuplicateId(_))));
        let mut dup_bytes = good.clone();
        dup_bytes[11..19].copy_from_slice(&2u64.to_le_bytes());
        dup_bytes.extend_from_slice(&good[HEADER_LEN..]);
        assert!(matches!(decode_embeddings(&dup_bytes), Err(StoreError::DuplicateId(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_embeddings(&trailing), Err(StoreError::TrailingBytes { .. })));

        let ragged = EmbeddingFile { modality: Modality::Audio, dim: 2, records: vec![rec("a", 0.0, 3)] };
        assert!(matches!(encode_embeddings(&ragged), Err(StoreError::DimMismatch { .. })));
    }
}
