//! Passage retrieval: corpus ingestion, a BM25 inverted index, and
//! threshold-filtered cross-modal search over embedded passages.

mod bm25;
mod embed;
mod ingest;

use serde::{Deserialize, Serialize};

pub use bm25::{tokenize, Bm25Index, Bm25Params, IndexError, INDEX_FORMAT_VERSION};
pub use embed::{
    cosine, normalize, CrossModalIndex, EmbeddingError, EmbeddingProvider, HttpEmbeddingProvider,
    StaticEmbeddings,
};
pub use ingest::{
    chunk, filter_pages, ingest_dump, read_documents, Document, FilterCounts, IngestError,
    IngestReport, MIN_PAGE_WORDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PassageId(pub u64);

impl std::fmt::Display for PassageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: PassageId,
    pub source_doc: String,
    /// Half-open whitespace-token range within the source document.
    pub token_span: (usize, usize),
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub doc_count: usize,
    pub passage_count: usize,
    /// Mean whitespace-token length of stored passages.
    pub avg_passage_len: f64,
    pub vocabulary_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    /// Cross-modal similarity cutoff; a hit must be strictly above it.
    pub tau: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 8,
            tau: 0.9,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            chunk_size: 256,
            chunk_overlap: 32,
        }
    }
}

impl RetrievalConfig {
    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }
}
