use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    restore_stop, ChatModel, Completion, DecodingConfig, GatewayError, Message, Part, Role,
    StopReason,
};
use crate::task::ImageRef;
use crate::util::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImagePolicy {
    /// Local files are sent as base64 data URLs; remote URLs pass through.
    #[default]
    Inline,
    /// The reference string is sent verbatim.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "crate::clock::serde_secs")]
    pub base_delay: Duration,
    #[serde(with = "crate::clock::serde_secs")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    /// Server base URL (`http://host:8000/v1`) or the full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(with = "crate::clock::serde_secs")]
    pub timeout: Duration,
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub image_policy: ImagePolicy,
}

impl GatewayConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            image_policy: ImagePolicy::Inline,
        }
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Blocking chat-completions client with bounded in-flight requests.
pub struct HttpGateway {
    config: GatewayConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

impl HttpGateway {
    pub fn new(config: GatewayConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Semaphore::new(config.max_in_flight.max(1));
        Self {
            config,
            agent,
            slots,
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn image_url(&self, image: &ImageRef) -> Result<String, GatewayError> {
        if self.config.image_policy == ImagePolicy::Reference || image.is_remote() {
            return Ok(image.as_str().to_string());
        }
        let path = Path::new(image.as_str());
        let bytes = std::fs::read(path).map_err(|e| {
            GatewayError::InvalidRequest(format!("cannot read image {}: {e}", path.display()))
        })?;
        let mime = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{mime};base64,{data}"))
    }

    pub(crate) fn request_body(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Value, GatewayError> {
        let mut wire = Vec::with_capacity(messages.len());
        for m in messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let mut content = Vec::with_capacity(m.parts.len());
            for p in &m.parts {
                content.push(match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(i) => {
                        json!({"type": "image_url", "image_url": {"url": self.image_url(i)?}})
                    }
                });
            }
            wire.push(json!({"role": role, "content": content}));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": wire,
            "temperature": config.temperature,
            "top_p": config.top_p,
            "top_k": config.top_k,
            "repetition_penalty": config.repetition_penalty,
            "max_tokens": config.max_new_tokens,
        });
        if !config.stop_sequences.is_empty() {
            body["stop"] = json!(config.stop_sequences);
            body["include_stop_str_in_output"] = json!(true);
        }
        Ok(body)
    }

    fn send_once(&self, body: &str) -> Result<(u16, String), GatewayError> {
        let transport = |e: ureq::Error| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        };
        let mut req = self
            .agent
            .post(self.config.url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        Ok((status, text))
    }

    fn classify(status: u16, body: String) -> Result<String, GatewayError> {
        match status {
            200..=299 => Ok(body),
            408 | 429 | 500..=599 => Err(GatewayError::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {}", snippet(&body)),
            }),
            400 if body.contains("context length") || body.contains("maximum context") => {
                Err(GatewayError::BudgetExceeded(snippet(&body)))
            }
            _ => Err(GatewayError::Protocol(format!("HTTP {status}: {}", snippet(&body)))),
        }
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(300).collect()
}

/// Decode a chat-completions response body.
pub(crate) fn parse_response(
    body: &str,
    config: &DecodingConfig,
) -> Result<(String, StopReason, Option<String>), GatewayError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(format!("not JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("missing choices[0]".into()))?;
    let content = &choice["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect(),
        _ => return Err(GatewayError::Protocol("missing message content".into())),
    };
    if let Some(used) = v["usage"]["completion_tokens"].as_u64() {
        if used > u64::from(config.max_new_tokens) {
            return Err(GatewayError::BudgetExceeded(format!(
                "{used} completion tokens > cap {}",
                config.max_new_tokens
            )));
        }
    }
    let finish = choice["finish_reason"].as_str().unwrap_or("stop");
    if finish == "length" {
        return Ok((text, StopReason::LengthCap, None));
    }
    let reported = choice["stop_reason"].as_str();
    let (text, matched) = restore_stop(text, &config.stop_sequences, reported);
    Ok(match matched {
        Some(stop) => (text, StopReason::StopSequence, Some(stop)),
        None => (text, StopReason::EndOfSequence, None),
    })
}

impl ChatModel for HttpGateway {
    fn complete(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Completion, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        config.validate()?;
        let body = self.request_body(messages, config)?.to_string();
        let _slot = self.slots.acquire();

        let max_attempts = self.config.retry.max_attempts.max(1);
        let mut model_time = Duration::ZERO;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let result = self
                .send_once(&body)
                .and_then(|(status, text)| Self::classify(status, text));
            model_time += started.elapsed();
            match result {
                Ok(text) => {
                    let (text, stop_reason, matched_stop) = parse_response(&text, config)?;
                    debug!(?stop_reason, attempt, "completion received");
                    return Ok(Completion {
                        text,
                        stop_reason,
                        matched_stop,
                        model_time,
                    });
                }
                Err(GatewayError::Transport { message, .. }) if attempt < max_attempts => {
                    let delay = self.config.retry.delay(attempt);
                    warn!(attempt, ?delay, %message, "retrying model call");
                    std::thread::sleep(delay);
                }
                Err(GatewayError::Transport { message, .. }) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(other) => return Err(other),
            }
        }
    }
}
