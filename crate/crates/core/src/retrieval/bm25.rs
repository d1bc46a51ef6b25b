//! In-memory BM25 index with a versioned on-disk layout.
//!
//! score(q, p) = Σ_{t ∈ distinct(q)} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|p|/avgdl))
//! idf(t)      = ln((N − n_t + 0.5) / (n_t + 0.5) + 1)
//!
//! Lengths count analyzer tokens (lowercased alphanumeric runs).

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IndexStats, Passage, PassageId};

pub const INDEX_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PASSAGES: &str = "passages.jsonl";
const POSTINGS: &str = "postings.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("no index at {0}")]
    IndexMissing(PathBuf),
    #[error("index at {path} has format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("index at {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("index I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    params: Bm25Params,
    stats: IndexStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct PostingLine {
    term: String,
    /// `(passage slot, term frequency)`
    postings: Vec<(u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    passages: Vec<Passage>,
    lengths: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<(u32, u32)>>,
    params: Bm25Params,
    stats: IndexStats,
}

impl Bm25Index {
    /// Build from passages in id order. `doc_count` is the number of source
    /// documents the passages came from.
    pub fn build(mut passages: Vec<Passage>, doc_count: usize, params: Bm25Params) -> Self {
        passages.sort_by_key(|p| p.id);
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut lengths = Vec::with_capacity(passages.len());
        for (slot, p) in passages.iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0u32;
            for t in tokenize(&p.text) {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            lengths.push(len);
            for (term, n) in tf {
                postings.entry(term).or_default().push((slot as u32, n));
            }
        }
        let total: f64 = lengths.iter().map(|&l| f64::from(l)).sum();
        let avg_len = if lengths.is_empty() { 0.0 } else { total / lengths.len() as f64 };
        let span_total: usize = passages.iter().map(|p| p.token_span.1 - p.token_span.0).sum();
        let stats = IndexStats {
            doc_count,
            passage_count: passages.len(),
            avg_passage_len: if passages.is_empty() {
                0.0
            } else {
                span_total as f64 / passages.len() as f64
            },
            vocabulary_size: postings.len(),
        };
        Self {
            passages,
            lengths,
            avg_len,
            postings,
            params,
            stats,
        }
    }

    pub fn stats(&self) -> &IndexStats {
        &self.stats
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn set_params(&mut self, params: Bm25Params) {
        self.params = params;
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn passage(&self, id: PassageId) -> Option<&Passage> {
        self.passages
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.passages[i])
    }

    fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.passages.len() as f64;
        let df = doc_freq as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top-`k` passages by descending score, ties by ascending id. Passages
    /// matching no query term are never returned.
    pub fn search(&self, query: &str, k: usize) -> Vec<(&Passage, f64)> {
        let mut terms: Vec<String> = Vec::new();
        for t in tokenize(query) {
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(slot, tf) in list {
                let tf = f64::from(tf);
                let dl = f64::from(self.lengths[slot as usize]);
                let term_score = idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / self.avg_len));
                *scores.entry(slot).or_insert(0.0) += term_score;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(slot, s)| (&self.passages[slot as usize], s))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        let io = |path: PathBuf| move |source| IndexError::Io { path, source };
        std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

        let path = dir.join(PASSAGES);
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io(path.clone()))?);
        for p in &self.passages {
            serde_json::to_writer(&mut w, p).map_err(|e| IndexError::Io {
                path: path.clone(),
                source: e.into(),
            })?;
            w.write_all(b"\n").map_err(io(path.clone()))?;
        }
        w.flush().map_err(io(path.clone()))?;

        let path = dir.join(POSTINGS);
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io(path.clone()))?);
        let mut terms: Vec<_> = self.postings.iter().collect();
        terms.sort_by(|a, b| a.0.cmp(b.0));
        for (term, list) in terms {
            let line = PostingLine {
                term: term.clone(),
                postings: list.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| IndexError::Io {
                path: path.clone(),
                source: e.into(),
            })?;
            w.write_all(b"\n").map_err(io(path.clone()))?;
        }
        w.flush().map_err(io(path.clone()))?;

        // manifest last: its presence marks a complete index
        let manifest = Manifest {
            format_version: INDEX_FORMAT_VERSION,
            params: self.params,
            stats: self.stats.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io(path))
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(IndexError::IndexMissing(dir.to_path_buf()));
        }
        let corrupt = |reason: String| IndexError::Corrupt {
            path: dir.to_path_buf(),
            reason,
        };
        let io = |path: PathBuf| move |source| IndexError::Io { path, source };
        let raw = std::fs::read_to_string(&manifest_path).map_err(io(manifest_path.clone()))?;
        let version: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
        let found = version["format_version"].as_u64().unwrap_or(0) as u32;
        if found != INDEX_FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                path: dir.to_path_buf(),
                found,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(version).map_err(|e| corrupt(format!("manifest: {e}")))?;

        let path = dir.join(PASSAGES);
        let file = std::fs::File::open(&path).map_err(io(path.clone()))?;
        let mut passages = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(io(path.clone()))?;
            let p: Passage = serde_json::from_str(&line).map_err(|e| corrupt(format!("passage: {e}")))?;
            passages.push(p);
        }
        if passages.len() != manifest.stats.passage_count {
            return Err(corrupt(format!(
                "manifest lists {} passages, store has {}",
                manifest.stats.passage_count,
                passages.len()
            )));
        }

        let path = dir.join(POSTINGS);
        let file = std::fs::File::open(&path).map_err(io(path.clone()))?;
        let mut postings = HashMap::new();
        let mut lengths = vec![0u32; passages.len()];
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(io(path.clone()))?;
            let pl: PostingLine = serde_json::from_str(&line).map_err(|e| corrupt(format!("postings: {e}")))?;
            for &(slot, tf) in &pl.postings {
                let len = lengths
                    .get_mut(slot as usize)
                    .ok_or_else(|| corrupt(format!("posting slot {slot} out of range")))?;
                *len += tf;
            }
            postings.insert(pl.term, pl.postings);
        }
        let total: f64 = lengths.iter().map(|&l| f64::from(l)).sum();
        let avg_len = if lengths.is_empty() { 0.0 } else { total / lengths.len() as f64 };
        Ok(Self {
            passages,
            lengths,
            avg_len,
            postings,
            params: manifest.params,
            stats: manifest.stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(id: u64, text: &str) -> Passage {
        Passage {
            id: PassageId(id),
            source_doc: format!("d{id}"),
            token_span: (0, text.split_whitespace().count()),
            text: text.into(),
            embedding: None,
        }
    }

    fn tiny() -> Bm25Index {
        Bm25Index::build(
            vec![
                passage(1, "the cat sat on the mat"),
                passage(2, "a parallelogram has equal opposite sides"),
                passage(3, "dogs chase cats in the park"),
            ],
            3,
            Bm25Params::default(),
        )
    }

    #[test]
    fn only_matching_passage_ranked() {
        let idx = tiny();
        let hits = idx.search("Parallelogram!", 10);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0.id, PassageId(2));
        // N=3, n=1: idf = ln(2.5/1.5 + 1); tf=1; |p|=6, avgdl=(6+6+6)/3=6
        let idf = (2.5f64 / 1.5 + 1.0).ln();
        let expected = idf * (1.0 * 2.2) / (1.0 + 1.2 * (1.0 - 0.75 + 0.75 * 6.0 / 6.0));
        assert!((hits[0].1 - expected).abs() < 1e-12);
    }

    #[test]
    fn no_match_and_large_k() {
        let idx = tiny();
        assert!(idx.search("zebra", 5).is_empty());
        assert!(idx.search("", 5).is_empty());
        assert_eq!(idx.search("the cat parallelogram dogs", 100).len(), 3);
    }

    #[test]
    fn ties_broken_by_id() {
        let idx = Bm25Index::build(
            vec![passage(5, "alpha beta"), passage(4, "alpha gamma"), passage(9, "delta")],
            3,
            Bm25Params::default(),
        );
        let ids: Vec<_> = idx.search("alpha", 10).iter().map(|(p, _)| p.id.0).collect();
        assert_eq!(ids, vec![4, 5]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = tiny();
        idx.save(dir.path()).unwrap();
        let back = Bm25Index::load(dir.path()).unwrap();
        assert_eq!(back.stats(), idx.stats());
        let a: Vec<_> = idx.search("the cats", 3).into_iter().map(|(p, s)| (p.id, s)).collect();
        let b: Vec<_> = back.search("the cats", 3).into_iter().map(|(p, s)| (p.id, s)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Bm25Index::load(dir.path()), Err(IndexError::IndexMissing(_))));
        tiny().save(dir.path()).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&m).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&m, text).unwrap();
        assert!(matches!(
            Bm25Index::load(dir.path()),
            Err(IndexError::VersionMismatch { found: 99, .. })
        ));
    }
}
