//! Backbone model access.
//!
//! Everything above this module talks to a [`ChatModel`]. Two bindings ship:
//! [`HttpGateway`] for chat-completions servers and [`ScriptedModel`], a
//! deterministic replay double used by tests and golden traces.

mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::serde_secs;
use crate::protocol::{scan, SegmentKind, ToolKind};
use crate::task::ImageRef;

pub use http::{GatewayConfig, HttpGateway, ImagePolicy, RetryPolicy};
pub use mock::{ScriptEntry, ScriptedModel};

/// Sampling parameters for one model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub max_new_tokens: u32,
}

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 2048;

/// Decoding presets for the two backbone families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingPreset {
    /// Qwen2.5-VL and MiMo-VL.
    A,
    /// InternVL3.
    B,
}

impl std::str::FromStr for DecodingPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "qwen" | "mimo" => Ok(DecodingPreset::A),
            "b" | "internvl" => Ok(DecodingPreset::B),
            other => Err(format!("unknown decoding preset '{other}'")),
        }
    }
}

impl DecodingConfig {
    pub fn preset(preset: DecodingPreset) -> Self {
        let (temperature, top_p, top_k) = match preset {
            DecodingPreset::A => (0.7, 0.9, 50),
            DecodingPreset::B => (0.8, 0.8, 40),
        };
        Self {
            temperature,
            top_p,
            top_k,
            repetition_penalty: 1.05,
            stop_sequences: Vec::new(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    pub fn with_stops(mut self, stops: Vec<String>) -> Self {
        self.stop_sequences = stops;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |what: &str| Err(GatewayError::InvalidRequest(what.to_string()));
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if !(self.repetition_penalty >= 1.0) {
            return bad("repetition_penalty must be >= 1");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return bad("stop sequences must be non-empty strings");
        }
        Ok(())
    }
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self::preset(DecodingPreset::A)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user_text(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            parts: vec![Part::Text(text.into())],
        }
    }

    /// A user turn carrying the task image (if any) ahead of the text.
    pub fn user_with_image(image: Option<&ImageRef>, text: impl Into<String>) -> Self {
        let mut parts = Vec::with_capacity(2);
        if let Some(img) = image {
            parts.push(Part::Image(img.clone()));
        }
        parts.push(Part::Text(text.into()));
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(i) => Some(i),
            Part::Text(_) => None,
        })
    }
}

/// Concatenated text of every message, the string script predicates match against.
pub fn prompt_text(messages: &[Message]) -> String {
    messages.iter().map(Message::text).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    StopSequence,
    EndOfSequence,
    LengthCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub stop_reason: StopReason,
    pub matched_stop: Option<String>,
    #[serde(with = "serde_secs")]
    pub model_time: Duration,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("token budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted after {calls} call(s)")]
    ScriptExhausted { calls: usize },
    #[error("script entry {index} expects prompt containing {predicate:?}; prompt tail: {context:?}")]
    ScriptMismatch {
        index: usize,
        predicate: String,
        context: String,
    },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

/// A handle to a backbone model. Implementations must be shareable across
/// worker threads; each call is independent.
pub trait ChatModel: Send + Sync {
    fn complete(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Completion, GatewayError>;
}

impl<M: ChatModel + ?Sized> ChatModel for std::sync::Arc<M> {
    fn complete(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Completion, GatewayError> {
        (**self).complete(messages, config)
    }
}

impl<M: ChatModel + ?Sized> ChatModel for &M {
    fn complete(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Completion, GatewayError> {
        (**self).complete(messages, config)
    }
}

/// Wraps a model and accumulates the model time and call count of every
/// successful completion.
pub struct MeteredModel<M> {
    inner: M,
    nanos: AtomicU64,
    calls: AtomicU64,
}

impl<M: ChatModel> MeteredModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            nanos: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn model_time(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::Relaxed))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<M: ChatModel> ChatModel for MeteredModel<M> {
    fn complete(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Completion, GatewayError> {
        let out = self.inner.complete(messages, config)?;
        self.nanos
            .fetch_add(out.model_time.as_nanos() as u64, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }
}

/// Cut `text` after the earliest stop sequence it contains. On a tie in
/// position the longer stop wins. Returns the retained text and the stop.
pub fn apply_stops(text: &str, stops: &[String]) -> Option<(String, String)> {
    let mut best: Option<(usize, &String)> = None;
    for stop in stops.iter().filter(|s| !s.is_empty()) {
        if let Some(i) = text.find(stop.as_str()) {
            let better = match best {
                None => true,
                Some((b, s)) => i < b || (i == b && stop.len() > s.len()),
            };
            if better {
                best = Some((i, stop));
            }
        }
    }
    best.map(|(i, stop)| (text[..i + stop.len()].to_string(), stop.clone()))
}

/// Post-condition repair for servers that strip the matched stop string.
///
/// `reported` is the stop the server says fired, when it says so. Without a
/// report, a completion that ends inside an open tag whose closer is a
/// configured stop is taken to have been stripped.
pub fn restore_stop(
    text: String,
    stops: &[String],
    reported: Option<&str>,
) -> (String, Option<String>) {
    if let Some(stop) = stops.iter().find(|s| text.ends_with(s.as_str())) {
        return (text, Some(stop.clone()));
    }
    if let Some(r) = reported {
        if stops.iter().any(|s| s == r) {
            return (format!("{text}{r}"), Some(r.to_string()));
        }
    }
    let last = scan(&text).pop();
    if let Some(seg) = last.filter(|s| s.kind == SegmentKind::Unterminated) {
        let closer = seg.tool.map(ToolKind::close_tag).unwrap_or_default();
        if stops.iter().any(|s| s == closer) {
            let sep = if text.ends_with(char::is_whitespace) { "" } else { " " };
            return (format!("{text}{sep}{closer}"), Some(closer.to_string()));
        }
    }
    (text, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let a = DecodingConfig::preset(DecodingPreset::A);
        assert_eq!((a.temperature, a.top_p, a.top_k, a.repetition_penalty), (0.7, 0.9, 50, 1.05));
        let b = DecodingConfig::preset(DecodingPreset::B);
        assert_eq!((b.temperature, b.top_p, b.top_k, b.repetition_penalty), (0.8, 0.8, 40, 1.05));
        assert_eq!(a.max_new_tokens, 2048);
        assert_eq!("internvl".parse::<DecodingPreset>().unwrap(), DecodingPreset::B);
    }

    #[test]
    fn validation() {
        let mut c = DecodingConfig::default();
        assert!(c.validate().is_ok());
        c.top_p = 0.0;
        assert!(c.validate().is_err());
        c.top_p = 1.0;
        c.repetition_penalty = 0.9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn earliest_stop_wins() {
        let stops = ToolKind::closers();
        let (t, s) = apply_stops("a <code> x </code> <search> y </search>", &stops).unwrap();
        assert_eq!(t, "a <code> x </code>");
        assert_eq!(s, "</code>");
        assert!(apply_stops("no stops", &stops).is_none());
    }

    #[test]
    fn stripped_stop_restored() {
        let stops = ToolKind::closers();
        let (t, s) = restore_stop("q <search> capital of France ".into(), &stops, None);
        assert_eq!(t, "q <search> capital of France </search>");
        assert_eq!(s.as_deref(), Some("</search>"));
        let (t, s) = restore_stop("<code> 1".into(), &stops, Some("</code>"));
        assert_eq!(t, "<code> 1</code>");
        assert_eq!(s.as_deref(), Some("</code>"));
        let (t, s) = restore_stop("plain".into(), &stops, None);
        assert_eq!((t.as_str(), s), ("plain", None));
    }
}
