//! Per-role retrieval store: documents are chunked, embedded and searched
//! by exact cosine similarity.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::RoleId;

pub const BANK_FORMAT_VERSION: &str = "1.0";
pub const HASH_EMBEDDER_DIM: usize = 256;
pub const DEFAULT_CHUNK_SIZE: usize = 800;
pub const DEFAULT_CHUNK_OVERLAP: usize = 100;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("bank `{0}` is sealed; documents can only be ingested before build")]
    BankSealed(String),
    #[error("document `{0}` is empty")]
    EmptyDocument(String),
    #[error("bank `{0}` has not been built")]
    BankNotBuilt(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("overlap {overlap} must be smaller than chunk size {chunk_size}")]
    InvalidChunking { chunk_size: usize, overlap: usize },
    #[error("embedding dimension {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder failure: {0}")]
    Embedder(String),
    #[error("bank file: {0}")]
    Format(String),
}

impl KnowledgeError {
    pub fn code(&self) -> &'static str {
        match self {
            KnowledgeError::BankSealed(_) => "BankSealed",
            KnowledgeError::EmptyDocument(_) => "EmptyDocument",
            KnowledgeError::BankNotBuilt(_) => "BankNotBuilt",
            KnowledgeError::InvalidK => "InvalidK",
            KnowledgeError::InvalidChunking { .. } => "InvalidChunking",
            KnowledgeError::DimensionMismatch { .. } => "DimensionMismatch",
            KnowledgeError::Embedder(_) => "EmbedderFailure",
            KnowledgeError::Format(_) => "ParseError",
        }
    }
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, KnowledgeError>;
}

/// Signed feature hashing of word unigrams and bigrams into a fixed
/// number of buckets, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            dim: HASH_EMBEDDER_DIM,
        }
    }
}

impl HashEmbedder {
    pub const DEFAULT: HashEmbedder = HashEmbedder {
        dim: HASH_EMBEDDER_DIM,
    };

    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0f64; self.dim];
        let mut add = |feature: &str| {
            let h = fnv1a64(feature.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            acc[bucket] += sign;
        };
        for t in &tokens {
            add(t);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        if tokens.is_empty() {
            // Punctuation-only text still gets a stable direction.
            for c in text.chars().filter(|c| !c.is_whitespace()) {
                add(&c.to_string());
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; self.dim];
        }
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-ngram-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, KnowledgeError> {
        Ok(self.embed_text(text))
    }
}

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Cosine similarity, clamped to [-1, 1]. Zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub source_doc: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// Bank the document belongs to, from the front-matter `role` field.
    #[serde(default)]
    pub bank_id: Option<String>,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            bank_id: None,
            text: text.into(),
        }
    }

    /// Parses a markdown/plain-text file with an optional `---` front-matter
    /// header carrying `doc_id` and `role`.
    pub fn parse(raw: &str, fallback_id: &str) -> Result<Document, KnowledgeError> {
        let mut doc_id = fallback_id.to_string();
        let mut bank_id = None;
        let mut body = raw;
        let trimmed = raw.trim_start();
        if let Some(rest) = trimmed.strip_prefix("---") {
            let rest = rest.trim_start_matches([' ', '\t']);
            let rest = rest.strip_prefix('\n').unwrap_or(rest);
            let end = rest
                .find("\n---")
                .ok_or_else(|| KnowledgeError::Format("unterminated front-matter".into()))?;
            for line in rest[..end].lines() {
                let Some((k, v)) = line.split_once(':') else {
                    continue;
                };
                let v = v.trim().trim_matches('"').to_string();
                match k.trim() {
                    "doc_id" => doc_id = v,
                    "role" | "bank" | "bank_id" => bank_id = Some(v),
                    _ => {}
                }
            }
            let after = &rest[end + 4..];
            body = after.strip_prefix('\n').unwrap_or(after);
        }
        Ok(Document {
            doc_id,
            bank_id,
            text: body.trim().to_string(),
        })
    }
}

/// Splits `text` into chunks of at most `chunk_size` characters. Each
/// chunk after the first starts `overlap` characters before the previous
/// one ended, so stripping the first `overlap` characters of every later
/// chunk and concatenating reconstructs the input. Chunk ends prefer a
/// sentence break in the back half of the window.
pub fn chunk_text(text: &str, chunk_size: usize, overlap: usize) -> Vec<String> {
    assert!(overlap < chunk_size, "overlap must be smaller than chunk size");
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let hard_end = (start + chunk_size).min(n);
        let end = if hard_end == n {
            n
        } else {
            let floor = start + (overlap + 1).max(chunk_size / 2);
            (floor..hard_end)
                .rev()
                .find(|&i| is_sentence_break(&chars, i))
                .unwrap_or(hard_end)
        };
        out.push(chars[start..end].iter().collect());
        if end == n {
            break;
        }
        start = end - overlap;
    }
    out
}

/// True when a chunk may end just before index `i`.
fn is_sentence_break(chars: &[char], i: usize) -> bool {
    i > 0 && matches!(chars[i - 1], '.' | '!' | '?' | '\n') && chars[i].is_whitespace()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeBank {
    pub bank_id: String,
    pub embedder_id: String,
    pub dim: usize,
    pub chunks: Vec<Chunk>,
    pub built: bool,
}

impl KnowledgeBank {
    pub fn new(bank_id: impl Into<String>, embedder: &dyn Embedder) -> Self {
        KnowledgeBank {
            bank_id: bank_id.into(),
            embedder_id: embedder.id(),
            dim: embedder.dim(),
            chunks: Vec::new(),
            built: false,
        }
    }

    pub fn ingest_document(
        &mut self,
        doc: &Document,
        chunk_size: usize,
        overlap: usize,
        embedder: &dyn Embedder,
    ) -> Result<usize, KnowledgeError> {
        if self.built {
            return Err(KnowledgeError::BankSealed(self.bank_id.clone()));
        }
        if overlap >= chunk_size {
            return Err(KnowledgeError::InvalidChunking {
                chunk_size,
                overlap,
            });
        }
        if doc.text.trim().is_empty() {
            return Err(KnowledgeError::EmptyDocument(doc.doc_id.clone()));
        }
        let pieces = chunk_text(&doc.text, chunk_size, overlap);
        let count = pieces.len();
        for (i, text) in pieces.into_iter().enumerate() {
            let embedding = normalize(embedder.embed(&text)?);
            if embedding.len() != self.dim {
                return Err(KnowledgeError::DimensionMismatch {
                    expected: self.dim,
                    got: embedding.len(),
                });
            }
            self.chunks.push(Chunk {
                chunk_id: format!("{}#{:04}", doc.doc_id, i),
                source_doc: doc.doc_id.clone(),
                text,
                embedding,
            });
        }
        Ok(count)
    }

    pub fn build(&mut self) {
        self.built = true;
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn retrieve_top_k(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<ScoredChunk>, KnowledgeError> {
        let q = embedder.embed(query)?;
        self.retrieve_by_vector(&q, k)
    }

    pub fn retrieve_by_vector(
        &self,
        query: &[f32],
        k: usize,
    ) -> Result<Vec<ScoredChunk>, KnowledgeError> {
        if !self.built {
            return Err(KnowledgeError::BankNotBuilt(self.bank_id.clone()));
        }
        if k == 0 {
            return Err(KnowledgeError::InvalidK);
        }
        if query.len() != self.dim {
            return Err(KnowledgeError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(f64, &Chunk)> = self
            .chunks
            .iter()
            .map(|c| (cosine(query, &c.embedding), c))
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, c)| ScoredChunk {
                chunk: c.clone(),
                score,
            })
            .collect())
    }

    pub fn to_file_string(&self) -> String {
        let file = BankFile {
            format_version: BANK_FORMAT_VERSION.to_string(),
            bank: self.clone(),
        };
        serde_json::to_string(&file).expect("bank serializes")
    }

    pub fn from_file_str(s: &str) -> Result<KnowledgeBank, KnowledgeError> {
        let file: BankFile =
            serde_json::from_str(s).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        crate::records::check_version(&file.format_version, BANK_FORMAT_VERSION)
            .map_err(|e| KnowledgeError::Format(e.to_string()))?;
        let bank = file.bank;
        if let Some(c) = bank.chunks.iter().find(|c| c.embedding.len() != bank.dim) {
            return Err(KnowledgeError::DimensionMismatch {
                expected: bank.dim,
                got: c.embedding.len(),
            });
        }
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format_version: String,
    #[serde(flatten)]
    bank: KnowledgeBank,
}

/// Built banks keyed by id, plus the embedder used to query them.
#[derive(Clone)]
pub struct KnowledgeLibrary {
    banks: BTreeMap<String, Arc<KnowledgeBank>>,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for KnowledgeLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeLibrary")
            .field("banks", &self.banks.keys().collect::<Vec<_>>())
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

impl KnowledgeLibrary {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        KnowledgeLibrary {
            banks: BTreeMap::new(),
            embedder,
        }
    }

    pub fn insert(&mut self, bank: KnowledgeBank) {
        self.banks.insert(bank.bank_id.clone(), Arc::new(bank));
    }

    pub fn get(&self, bank_id: &str) -> Option<&Arc<KnowledgeBank>> {
        self.banks.get(bank_id)
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn bank_ids(&self) -> impl Iterator<Item = &str> {
        self.banks.keys().map(String::as_str)
    }

    /// Builds one bank per distinct `bank_id` found on the documents.
    pub fn from_documents(
        docs: &[Document],
        embedder: Arc<dyn Embedder>,
        chunk_size: usize,
        overlap: usize,
    ) -> Result<Self, KnowledgeError> {
        let mut banks: BTreeMap<String, KnowledgeBank> = BTreeMap::new();
        for doc in docs {
            let bank_id = doc.bank_id.clone().unwrap_or_else(|| "general".to_string());
            let bank = banks
                .entry(bank_id.clone())
                .or_insert_with(|| KnowledgeBank::new(bank_id, embedder.as_ref()));
            bank.ingest_document(doc, chunk_size, overlap, embedder.as_ref())?;
        }
        let mut lib = KnowledgeLibrary::new(embedder);
        for (_, mut bank) in banks {
            bank.build();
            lib.insert(bank);
        }
        Ok(lib)
    }
}

/// Default bank binding per role.
pub fn default_bank_for(role: RoleId) -> Option<&'static str> {
    match role {
        RoleId::Patient => None,
        RoleId::ChiefSurgeon | RoleId::SurgeonAssistant => Some("chief_surgeon"),
        RoleId::Anesthetist => Some("anesthetist"),
        RoleId::ScrubNurse | RoleId::WardNurse | RoleId::RoomNurse => Some("nursing"),
        RoleId::SurgeryCopilot => Some("surgery_copilot"),
    }
}
