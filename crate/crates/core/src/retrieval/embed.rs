use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::Passage;
use crate::task::ImageRef;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("no embedding provider configured")]
    EmbeddingUnavailable,
    #[error("embedding request failed: {0}")]
    Request(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("zero-norm embedding")]
    ZeroVector,
}

/// Maps images and text into one unit-norm vector space.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f32>, EmbeddingError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError>;
}

pub fn normalize(mut v: Vec<f32>) -> Result<Vec<f32>, EmbeddingError> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroVector);
    }
    for x in &mut v {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(v)
}

/// Cosine similarity in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::Dimension(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Fixed lookup table, keyed by image reference or exact text. Test double.
#[derive(Debug, Clone, Default)]
pub struct StaticEmbeddings {
    images: HashMap<String, Vec<f32>>,
    texts: HashMap<String, Vec<f32>>,
}

impl StaticEmbeddings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn image(mut self, key: impl Into<String>, v: Vec<f32>) -> Self {
        self.images.insert(key.into(), v);
        self
    }

    pub fn text(mut self, key: impl Into<String>, v: Vec<f32>) -> Self {
        self.texts.insert(key.into(), v);
        self
    }
}

impl EmbeddingProvider for StaticEmbeddings {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f32>, EmbeddingError> {
        let v = self
            .images
            .get(image.as_str())
            .ok_or_else(|| EmbeddingError::Request(format!("no stub vector for image {image}")))?;
        normalize(v.clone())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        let v = self
            .texts
            .get(text)
            .ok_or_else(|| EmbeddingError::Request(format!("no stub vector for text {text:?}")))?;
        normalize(v.clone())
    }
}

/// Encoder service binding: POST `{"image": url}` or `{"text": s}`, reply is a
/// float array or `{"embedding": [...]}`.
pub struct HttpEmbeddingProvider {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }

    fn post(&self, body: Value) -> Result<Vec<f32>, EmbeddingError> {
        let err = |e: ureq::Error| EmbeddingError::Request(e.to_string());
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .map_err(err)?;
        let text = resp.body_mut().read_to_string().map_err(err)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| EmbeddingError::Request(e.to_string()))?;
        let arr = v
            .as_array()
            .or_else(|| v.get("embedding").and_then(Value::as_array))
            .ok_or_else(|| EmbeddingError::Request("reply is not a float array".into()))?;
        let floats = arr
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| EmbeddingError::Request("non-numeric embedding entry".into()))?;
        normalize(floats)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f32>, EmbeddingError> {
        let url = if image.is_remote() {
            image.as_str().to_string()
        } else {
            let bytes = std::fs::read(image.as_str())
                .map_err(|e| EmbeddingError::Request(format!("cannot read image {image}: {e}")))?;
            format!(
                "data:application/octet-stream;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            )
        };
        self.post(json!({ "image": url }))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        self.post(json!({ "text": text }))
    }
}

/// Passages with text embeddings, queried by image.
pub struct CrossModalIndex {
    items: Vec<Passage>,
    provider: Option<Arc<dyn EmbeddingProvider>>,
}

impl CrossModalIndex {
    /// Passages without an embedding are skipped.
    pub fn new(passages: impl IntoIterator<Item = Passage>, provider: Option<Arc<dyn EmbeddingProvider>>) -> Self {
        let mut items: Vec<Passage> = passages.into_iter().filter(|p| p.embedding.is_some()).collect();
        items.sort_by_key(|p| p.id);
        Self { items, provider }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Every candidate's similarity to `query`, in id order.
    pub fn similarities(&self, query: &[f32]) -> Result<Vec<(&Passage, f64)>, EmbeddingError> {
        self.items
            .iter()
            .map(|p| Ok((p, cosine(query, p.embedding.as_deref().unwrap_or_default())?)))
            .collect()
    }

    /// Candidates with similarity strictly above `tau`, best first (ties by
    /// id), at most `k`.
    pub fn search_vector(&self, query: &[f32], k: usize, tau: f64) -> Result<Vec<(&Passage, f64)>, EmbeddingError> {
        let mut hits: Vec<_> = self
            .similarities(query)?
            .into_iter()
            .filter(|(_, s)| *s > tau)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn image_search(&self, image: &ImageRef, k: usize, tau: f64) -> Result<Vec<(&Passage, f64)>, EmbeddingError> {
        let provider = self.provider.as_ref().ok_or(EmbeddingError::EmbeddingUnavailable)?;
        let query = provider.embed_image(image)?;
        self.search_vector(&query, k, tau)
    }
}
