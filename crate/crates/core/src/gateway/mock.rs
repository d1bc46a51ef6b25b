use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    apply_stops, prompt_text, ChatModel, Completion, DecodingConfig, GatewayError, Message,
    StopReason,
};

/// One scripted reply. When `predicate` is set the prompt must contain it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    pub reply: String,
}

impl ScriptEntry {
    pub fn reply(reply: impl Into<String>) -> Self {
        Self {
            predicate: None,
            reply: reply.into(),
        }
    }

    pub fn expecting(predicate: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            predicate: Some(predicate.into()),
            reply: reply.into(),
        }
    }
}

/// Replays a fixed list of replies in call order, applying stop sequences the
/// way a server would (stop retained).
pub struct ScriptedModel {
    script: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
    latency: Duration,
}

const CONTEXT_CHARS: usize = 240;

impl ScriptedModel {
    pub fn new(script: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        if script.is_empty() {
            return Err(GatewayError::InvalidRequest("mock script is empty".into()));
        }
        Ok(Self {
            script,
            cursor: Mutex::new(0),
            latency: Duration::ZERO,
        })
    }

    pub fn from_replies<S: Into<String>>(
        replies: impl IntoIterator<Item = S>,
    ) -> Result<Self, GatewayError> {
        Self::new(replies.into_iter().map(ScriptEntry::reply).collect())
    }

    /// Load a JSON array of `{predicate?, reply}` objects.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::InvalidRequest(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        let script: Vec<ScriptEntry> = serde_json::from_str(&raw).map_err(|e| {
            GatewayError::InvalidRequest(format!("bad mock script {}: {e}", path.display()))
        })?;
        Self::new(script)
    }

    /// Sleep for `latency` on every call and report it as model time.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn calls_made(&self) -> usize {
        *self.cursor.lock().expect("cursor poisoned")
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl ChatModel for ScriptedModel {
    fn complete(
        &self,
        messages: &[Message],
        config: &DecodingConfig,
    ) -> Result<Completion, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        config.validate()?;
        let entry = {
            let mut cursor = self.cursor.lock().expect("cursor poisoned");
            let Some(entry) = self.script.get(*cursor) else {
                return Err(GatewayError::ScriptExhausted { calls: *cursor + 1 });
            };
            let index = *cursor;
            *cursor += 1;
            if let Some(pred) = &entry.predicate {
                let prompt = prompt_text(messages);
                if !prompt.contains(pred.as_str()) {
                    let tail_start = prompt
                        .char_indices()
                        .rev()
                        .nth(CONTEXT_CHARS - 1)
                        .map_or(0, |(i, _)| i);
                    return Err(GatewayError::ScriptMismatch {
                        index,
                        predicate: pred.clone(),
                        context: prompt[tail_start..].to_string(),
                    });
                }
            }
            entry.clone()
        };
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let (text, stop_reason, matched_stop) =
            match apply_stops(&entry.reply, &config.stop_sequences) {
                Some((text, stop)) => (text, StopReason::StopSequence, Some(stop)),
                None => (entry.reply, StopReason::EndOfSequence, None),
            };
        Ok(Completion {
            text,
            stop_reason,
            matched_stop,
            model_time: self.latency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{scan, SegmentKind, ToolKind};

    fn msgs(text: &str) -> Vec<Message> {
        vec![Message::user_text(text)]
    }

    #[test]
    fn replays_in_order() {
        let m = ScriptedModel::from_replies(["A", "B"]).unwrap();
        let cfg = DecodingConfig::default();
        assert_eq!(m.complete(&msgs("x"), &cfg).unwrap().text, "A");
        assert_eq!(m.complete(&msgs("x"), &cfg).unwrap().text, "B");
    }

    #[test]
    fn exhaustion() {
        let m = ScriptedModel::from_replies(["1", "2", "3"]).unwrap();
        let cfg = DecodingConfig::default();
        for _ in 0..3 {
            m.complete(&msgs("x"), &cfg).unwrap();
        }
        assert_eq!(
            m.complete(&msgs("x"), &cfg),
            Err(GatewayError::ScriptExhausted { calls: 4 })
        );
    }

    #[test]
    fn empty_script_rejected() {
        assert!(ScriptedModel::new(vec![]).is_err());
    }

    #[test]
    fn predicate_checked() {
        let m = ScriptedModel::new(vec![
            ScriptEntry::expecting("global_plan", "{\"x\": 1}"),
            ScriptEntry::expecting("never there", "y"),
        ])
        .unwrap();
        let cfg = DecodingConfig::default();
        let c = m.complete(&msgs("return global_plan please"), &cfg).unwrap();
        assert_eq!(c.text, "{\"x\": 1}");
        match m.complete(&msgs("other prompt"), &cfg) {
            Err(GatewayError::ScriptMismatch { index, context, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(context, "other prompt");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn end_of_sequence_without_stops() {
        let m = ScriptedModel::from_replies(["Paris"]).unwrap();
        let c = m.complete(&msgs("q"), &DecodingConfig::default()).unwrap();
        assert_eq!(c.stop_reason, StopReason::EndOfSequence);
        assert_eq!(c.matched_stop, None);
    }

    #[test]
    fn stop_retained_in_reply() {
        // reference: the earliest closer in the reply, cut just after it
        let reply = "compute <code> print(6*7) </code> and then more text";
        let expected_cut = reply.find("</code>").unwrap() + "</code>".len();
        let m = ScriptedModel::from_replies([reply]).unwrap();
        let cfg = DecodingConfig::default().with_stops(ToolKind::closers());
        let c = m.complete(&msgs("q"), &cfg).unwrap();
        assert_eq!(c.stop_reason, StopReason::StopSequence);
        assert_eq!(c.matched_stop.as_deref(), Some("</code>"));
        assert_eq!(c.text, &reply[..expected_cut]);
        assert!(c.text.ends_with("</code>"));
        assert_eq!(scan(&c.text).last().unwrap().kind, SegmentKind::Invocation);
    }

    #[test]
    fn deterministic_replay() {
        let script = vec!["<search> a </search> tail", "done"];
        let cfg = DecodingConfig::default().with_stops(ToolKind::closers());
        let run = || {
            let m = ScriptedModel::from_replies(script.clone()).unwrap();
            (0..2)
                .map(|_| m.complete(&msgs("q"), &cfg).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
