use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bm25::{Bm25Index, Bm25Params};
use super::embed::{EmbeddingError, EmbeddingProvider};
use super::{IndexStats, Passage, PassageId};

/// Pages with fewer whitespace-delimited words than this are dropped.
pub const MIN_PAGE_WORDS: usize = 32;

/// One line of the ingestion dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps documents with at least [`MIN_PAGE_WORDS`] words, tallying both outcomes.
pub fn filter_pages<'a, I>(docs: I, counts: &'a mut FilterCounts) -> impl Iterator<Item = Document> + 'a
where
    I: IntoIterator<Item = Document>,
    I::IntoIter: 'a,
{
    docs.into_iter().filter(move |d| {
        let keep = d.text.split_whitespace().count() >= MIN_PAGE_WORDS;
        if keep {
            counts.kept += 1;
        } else {
            counts.dropped += 1;
        }
        keep
    })
}

/// Split a document into overlapping whitespace-token windows.
///
/// Window `i` covers `[i * stride, min(i * stride + size, n))` with
/// `stride = size - overlap`; windows stop once the end of the document is
/// covered. Ids are assigned sequentially from `next_id`.
pub fn chunk(doc: &Document, size: usize, overlap: usize, next_id: &mut u64) -> Vec<Passage> {
    assert!(size > overlap, "chunk size must exceed overlap");
    let tokens: Vec<&str> = doc.text.split_whitespace().collect();
    let n = tokens.len();
    let stride = size - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(n);
        out.push(Passage {
            id: PassageId(*next_id),
            source_doc: doc.id.clone(),
            token_span: (start, end),
            text: tokens[start..end].join(" "),
            embedding: None,
        });
        *next_id += 1;
        if end >= n {
            break;
        }
        start += stride;
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid document: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("embedding passage {id} failed: {source}")]
    Embedding {
        id: PassageId,
        #[source]
        source: EmbeddingError,
    },
}

/// Read a newline-delimited JSON dump of `{id, title, text}` objects.
pub fn read_documents(path: &Path) -> Result<Vec<Document>, IngestError> {
    let read_err = |source| IngestError::Read {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(read_err)?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(read_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line).map_err(|source| IngestError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents_read: usize,
    pub filter: FilterCounts,
    pub stats: IndexStats,
}

/// filter → chunk → (embed) → index.
pub fn ingest_dump(
    docs: Vec<Document>,
    chunk_size: usize,
    chunk_overlap: usize,
    params: Bm25Params,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<(Bm25Index, IngestReport), IngestError> {
    let documents_read = docs.len();
    let mut counts = FilterCounts::default();
    let mut next_id = 0u64;
    let mut passages = Vec::new();
    let mut kept_docs = 0;
    for doc in filter_pages(docs, &mut counts) {
        kept_docs += 1;
        passages.extend(chunk(&doc, chunk_size, chunk_overlap, &mut next_id));
    }
    if let Some(embedder) = embedder {
        for p in &mut passages {
            let v = embedder
                .embed_text(&p.text)
                .map_err(|source| IngestError::Embedding { id: p.id, source })?;
            p.embedding = Some(v);
        }
    }
    let index = Bm25Index::build(passages, kept_docs, params);
    let report = IngestReport {
        documents_read,
        filter: counts,
        stats: index.stats().clone(),
    };
    Ok((index, report))
}
