//! Embeddings, cosine similarity and exact top-k retrieval.
//!
//! Retrieval is a linear scan over every entry. Knowledge bases here hold at
//! most a few thousand entries, so the scan is fast and its output can be
//! checked against a brute-force sort.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("vector is all zeros")]
    ZeroVector,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate index entry {0:?}")]
    DuplicateEntry(String),
    #[error("embedder {embedder} unavailable: {message}")]
    EmbedderUnavailable { embedder: String, message: String },
    #[error("index was built by embedder {found:?}, expected {expected:?}")]
    EmbedderMismatch { expected: String, found: String },
    #[error("index file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        B64.encode(bytes)
    }

    fn from_base64(text: &str) -> Result<Self, String> {
        let bytes = B64.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!(
                "vector byte length {} is not a multiple of 8",
                bytes.len()
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(values).map_err(|e| e.to_string())
    }
}

/// Maps text to a fixed-length vector.
pub trait Embedder: Send + Sync {
    /// Stable identifier; recorded in indices and used as a cache namespace.
    fn id(&self) -> String;

    /// Declared dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

/// Embeds `text`, validating finiteness and the embedder's declared dimension.
pub fn embed(text: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let raw = embedder.embed_raw(text)?;
    if let Some(expected) = embedder.dim() {
        if raw.len() != expected {
            return Err(RetrievalError::DimensionMismatch {
                expected,
                actual: raw.len(),
            });
        }
    }
    EmbeddingVector::new(raw)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Offline bag-of-tokens embedder: each token is hashed to a signed bucket
/// and the resulting counts are L2-normalised.
///
/// Tokens are identifier/number runs plus every other non-whitespace
/// character. Deterministic across platforms; intended for tests and
/// offline runs, not for retrieval quality.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let word = c.is_alphanumeric() || c == '_';
        match (word, start) {
            (true, None) => start = Some(i),
            (true, Some(_)) => {}
            (false, s) => {
                if let Some(s) = s {
                    tokens.push(&text[s..i]);
                    start = None;
                }
                if !c.is_whitespace() {
                    tokens.push(&text[i..i + c.len_utf8()]);
                }
            }
        }
    }
    if let Some(s) = start {
        tokens.push(&text[s..]);
    }
    tokens
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        use sha2::{Digest, Sha256};
        let mut values = vec![0.0f64; self.dim];
        for token in tokenize(text) {
            let digest = Sha256::digest(token.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().expect("digest prefix"));
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            values[(bucket % self.dim as u64) as usize] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every token cancelled out; fall back to a single bucket so the
            // vector stays usable for cosine similarity.
            let digest = Sha256::digest(text.as_bytes());
            values[digest[0] as usize % self.dim] = 1.0;
            return Ok(values);
        }
        Ok(values.into_iter().map(|v| v / norm).collect())
    }
}

/// Embedder backed by an OpenAI-compatible `/embeddings` endpoint.
///
/// The dimension is pinned from the first successful response; later
/// responses of a different length are rejected.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    timeout: Duration,
    dim: OnceLock<usize>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: [&'a str; 1],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            max_retries: 2,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            dim: OnceLock::new(),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, agent: &ureq::Agent, text: &str) -> Result<Vec<f64>, String> {
        let mut req = agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbeddingRequest {
                model: &self.model,
                input: [text],
            })
            .map_err(|e| e.to_string())?;
        let body: EmbeddingResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        body.data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| "response carried no embedding".to_string())
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&agent, text) {
                Ok(values) => {
                    let pinned = *self.dim.get_or_init(|| values.len());
                    if values.len() != pinned {
                        return Err(RetrievalError::DimensionMismatch {
                            expected: pinned,
                            actual: values.len(),
                        });
                    }
                    return Ok(values);
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed");
                    last = e;
                }
            }
        }
        Err(RetrievalError::EmbedderUnavailable {
            embedder: self.id(),
            message: last,
        })
    }
}

/// Disk cache in front of another embedder, keyed by
/// `(embedder id, sha256(text))`.
pub struct CachedEmbedder<E> {
    inner: E,
    dir: PathBuf,
    write_lock: Mutex<()>,
    misses: AtomicUsize,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            write_lock: Mutex::new(()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Number of calls forwarded to the wrapped embedder.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn path_for(&self, text: &str) -> PathBuf {
        let id = self.inner.id();
        let key = sha256_hex(format!("{id}\0{}", sha256_hex(text)));
        self.dir
            .join("embeddings")
            .join(sanitize(&id))
            .join(&key[..2])
            .join(format!("{key}.b64"))
    }
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `contents` to `path` via a temporary file and rename, so
/// concurrent readers never observe a partial file.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    static SEQ: AtomicUsize = AtomicUsize::new(0);
    let tmp = parent.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let path = self.path_for(text);
        if let Ok(cached) = fs::read_to_string(&path) {
            if let Ok(v) = EmbeddingVector::from_base64(cached.trim()) {
                return Ok(v.values);
            }
            tracing::warn!(path = %path.display(), "ignoring corrupt embedding cache entry");
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let values = self.inner.embed_raw(text)?;
        let encoded = EmbeddingVector::new(values.clone())?.to_base64();
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&path, encoded.as_bytes())?;
        Ok(values)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        (**self).embed_raw(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub entry_id: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub entry_id: String,
    pub score: f64,
}

/// Immutable-after-build exact retrieval index.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    embedder_id: String,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    embedder_id: String,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    entry_id: String,
    vector: String,
}

impl RetrievalIndex {
    pub fn new(dim: usize, embedder_id: impl Into<String>) -> Self {
        Self {
            dim,
            embedder_id: embedder_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        entry_id: impl Into<String>,
        vector: EmbeddingVector,
    ) -> Result<(), RetrievalError> {
        let entry_id = entry_id.into();
        if vector.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if vector.norm() == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        if self.entries.iter().any(|e| e.entry_id == entry_id) {
            return Err(RetrievalError::DuplicateEntry(entry_id));
        }
        self.entries.push(IndexEntry { entry_id, vector });
        Ok(())
    }

    /// Embeds every `(id, text)` item in order. The dimension comes from
    /// the first embedding.
    pub fn build<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a str)>,
        embedder: &dyn Embedder,
    ) -> Result<Self, RetrievalError> {
        let mut index: Option<Self> = None;
        for (id, text) in items {
            let vector = embed(text, embedder)?;
            let idx = index.get_or_insert_with(|| Self::new(vector.dim(), embedder.id()));
            idx.push(id, vector)?;
        }
        index.ok_or(RetrievalError::EmptyIndex)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains(&self, entry_id: &str) -> bool {
        self.entries.iter().any(|e| e.entry_id == entry_id)
    }

    /// The `min(k, len)` best entries by cosine similarity, descending; ties
    /// keep insertion order.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut hits = self
            .entries
            .iter()
            .map(|e| {
                Ok(Hit {
                    entry_id: e.entry_id.clone(),
                    score: cosine_sim(query, &e.vector)?,
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        // Stable sort: equal scores stay in insertion order.
        hits.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header = IndexHeader {
            dim: self.dim,
            embedder_id: self.embedder_id.clone(),
            entries: self.entries.len(),
        };
        writeln!(w, "{}", crate::jsonl::to_line(&header))?;
        for e in &self.entries {
            let line = IndexLine {
                entry_id: e.entry_id.clone(),
                vector: e.vector.to_base64(),
            };
            writeln!(w, "{}", crate::jsonl::to_line(&line))?;
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let format = |message: String| RetrievalError::Format {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path)?;
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| format("missing header".into()))?;
        let header: IndexHeader =
            serde_json::from_str(first).map_err(|e| format(format!("line 1: {e}")))?;
        let mut index = Self::new(header.dim, header.embedder_id);
        for (i, line) in lines {
            let rec: IndexLine =
                serde_json::from_str(line).map_err(|e| format(format!("line {}: {e}", i + 1)))?;
            let vector = EmbeddingVector::from_base64(&rec.vector)
                .map_err(|e| format(format!("line {}: {e}", i + 1)))?;
            index.push(rec.entry_id, vector)?;
        }
        if index.len() != header.entries {
            return Err(format(format!(
                "header declares {} entries, found {}",
                header.entries,
                index.len()
            )));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn hash_embedder_is_deterministic() {
        let e = HashEmbedder::default();
        assert_eq!(embed("x", &e).unwrap(), embed("x", &e).unwrap());
        assert_eq!(embed("x", &e).unwrap().dim(), 256);
    }

    #[test]
    fn hash_embedder_separates_near_identical_text() {
        let e = HashEmbedder::default();
        assert_ne!(embed("abc", &e).unwrap(), embed("abd", &e).unwrap());
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            embed("", &HashEmbedder::default()),
            Err(RetrievalError::EmptyText)
        ));
    }

    #[test]
    fn tokenizer_splits_identifiers_and_punctuation() {
        assert_eq!(
            tokenize("buf[i] = x_1;"),
            vec!["buf", "[", "i", "]", "=", "x_1", ";"]
        );
    }

    struct WrongDim;
    impl Embedder for WrongDim {
        fn id(&self) -> String {
            "wrong".into()
        }
        fn dim(&self) -> Option<usize> {
            Some(4)
        }
        fn embed_raw(&self, _: &str) -> Result<Vec<f64>, RetrievalError> {
            Ok(vec![1.0; 3])
        }
    }

    #[test]
    fn embedder_dimension_is_checked() {
        assert!(matches!(
            embed("x", &WrongDim),
            Err(RetrievalError::DimensionMismatch {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[1.0, 2.0, 3.0]);
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine_sim(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / sqrt(14 * 77), evaluated by hand.
        let expected = 32.0 / (14.0f64 * 77.0).sqrt();
        assert!((expected - 0.974_631_846).abs() < 1e-9);
        assert!((cosine_sim(&a, &v(&[4.0, 5.0, 6.0])).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_sim(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(RetrievalError::ZeroVector)
        ));
        assert!(matches!(
            cosine_sim(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn top_k_truncates_to_index_size() {
        let mut idx = RetrievalIndex::new(2, "t");
        for (i, x) in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].iter().enumerate() {
            idx.push(format!("e{i}"), v(x)).unwrap();
        }
        let hits = idx.top_k(&v(&[1.0, 0.1]), 5).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].entry_id, "e0");
        assert!(matches!(
            idx.top_k(&v(&[1.0, 0.0]), 0),
            Err(RetrievalError::InvalidK)
        ));
        assert!(matches!(
            RetrievalIndex::new(2, "t").top_k(&v(&[1.0, 0.0]), 1),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn duplicate_vectors_keep_insertion_order() {
        let mut idx = RetrievalIndex::new(2, "t");
        for id in ["c", "a", "b"] {
            idx.push(id, v(&[0.3, 0.7])).unwrap();
        }
        let ids: Vec<_> = idx
            .top_k(&v(&[1.0, 1.0]), 3)
            .unwrap()
            .into_iter()
            .map(|h| h.entry_id)
            .collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn push_rejects_bad_entries() {
        let mut idx = RetrievalIndex::new(2, "t");
        idx.push("a", v(&[1.0, 0.0])).unwrap();
        assert!(matches!(
            idx.push("a", v(&[0.0, 1.0])),
            Err(RetrievalError::DuplicateEntry(_))
        ));
        assert!(matches!(
            idx.push("b", v(&[1.0])),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            idx.push("c", v(&[0.0, 0.0])),
            Err(RetrievalError::ZeroVector)
        ));
    }

    #[test]
    fn index_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let e = HashEmbedder::new(32);
        let idx = RetrievalIndex::build([("a", "int x;"), ("b", "free(p); use(p);")], &e).unwrap();
        let path = dir.path().join("idx.jsonl");
        idx.save(&path).unwrap();
        assert_eq!(RetrievalIndex::load(&path).unwrap(), idx);
    }

    struct Counting(AtomicUsize);
    impl Embedder for Counting {
        fn id(&self) -> String {
            "counting".into()
        }
        fn dim(&self) -> Option<usize> {
            Some(8)
        }
        fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            HashEmbedder::new(8).embed_raw(text)
        }
    }

    #[test]
    fn cached_embedder_serves_repeats_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedEmbedder::new(Counting(AtomicUsize::new(0)), dir.path());
        let a = embed("strcpy(dst, src);", &cached).unwrap();
        let b = embed("strcpy(dst, src);", &cached).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.misses(), 1);
        let again = CachedEmbedder::new(Counting(AtomicUsize::new(0)), dir.path());
        assert_eq!(embed("strcpy(dst, src);", &again).unwrap(), a);
        assert_eq!(again.misses(), 0);
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-6))
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(a in arb_vec(6), b in arb_vec(6), alpha in 0.01f64..100.0) {
            let (va, vb) = (v(&a), v(&b));
            let ab = cosine_sim(&va, &vb).unwrap();
            prop_assert!((ab - cosine_sim(&vb, &va).unwrap()).abs() < 1e-12);
            let scaled = v(&a.iter().map(|x| x * alpha).collect::<Vec<_>>());
            prop_assert!((ab - cosine_sim(&scaled, &vb).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
