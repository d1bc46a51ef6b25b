//! Final answer extraction from a reasoning trace.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::executor::{ReasoningTrace, StepStatus};
use crate::gateway::{ChatModel, DecodingConfig, GatewayError, Message};
use crate::prompts::PromptAssets;
use crate::task::TaskInput;
use crate::util::render_template;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    /// Label (A, B, ...) of the matched option, for option tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_option: Option<String>,
    pub trace_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// The trace as the synthesizer sees it: failed tool payloads replaced by a
/// one-line note, revised code shown in its final form.
pub fn build_digest(trace: &ReasoningTrace) -> String {
    let mut out = String::new();
    for step in &trace.steps {
        match (step.status, &step.invocation, &step.result) {
            (StepStatus::ToolOk, Some(inv), Some(res)) => {
                if res.failed_attempts > 0 {
                    out.push_str(&format!(
                        "[{} failed {} attempt(s) omitted]\n",
                        res.failed_attempts, inv.tool
                    ));
                }
                match &res.revised_payload {
                    Some(revised) => out.push_str(&format!(
                        "{}{} {} {}",
                        step.reasoning,
                        inv.tool.open_tag(),
                        revised,
                        inv.tool.close_tag()
                    )),
                    None => out.push_str(&step.raw),
                }
                out.push_str(&format!("<result> {} </result>\n", res.content));
            }
            (StepStatus::ToolError, inv, res) => {
                out.push_str(&step.reasoning);
                let tool = inv.as_ref().map_or("tool".to_string(), |i| i.tool.to_string());
                let reason = res
                    .as_ref()
                    .and_then(|r| r.content.lines().find(|l| !l.trim().is_empty()))
                    .unwrap_or("unknown error")
                    .trim();
                out.push_str(&format!("[{tool} call failed: {reason}]\n"));
            }
            _ => out.push_str(&step.raw),
        }
    }
    out
}

fn strip_answer_prefix(reply: &str) -> &str {
    let t = reply.trim();
    for prefix in ["final answer:", "answer:"] {
        if t.len() >= prefix.len() && t[..prefix.len()].eq_ignore_ascii_case(prefix) {
            return t[prefix.len()..].trim();
        }
    }
    t
}

fn label_in(text: &str, labels: &[(String, &str)]) -> Option<String> {
    let bare = text.trim_matches(|c: char| c.is_whitespace() || "()[].:*".contains(c));
    if let Some((l, _)) = labels.iter().find(|(l, _)| l == bare) {
        return Some(l.clone());
    }
    // "B. Paris", "(B) Paris", "B: Paris"
    let lead = text.trim_start().trim_start_matches('(');
    let mut by_len: Vec<_> = labels.iter().collect();
    by_len.sort_by_key(|(l, _)| std::cmp::Reverse(l.len()));
    by_len
        .into_iter()
        .find(|(l, _)| {
            lead.strip_prefix(l.as_str())
                .and_then(|rest| rest.chars().next())
                .is_some_and(|c| matches!(c, '.' | ')' | ':'))
        })
        .map(|(l, _)| l.clone())
}

fn norm(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', ',', '!', '?'])
        .trim()
        .to_lowercase()
}

/// Map a free-form reply onto an option label: label match, then
/// case-insensitive value match, then a unique value substring.
pub fn map_option(reply: &str, task: &TaskInput) -> Option<String> {
    let labels = task.labelled_options();
    if labels.is_empty() {
        return None;
    }
    let reply = strip_answer_prefix(reply);
    if let Some(l) = label_in(reply, &labels) {
        return Some(l);
    }
    let lower = reply.to_lowercase();
    if let Some(i) = lower.rfind("answer is") {
        if let Some(l) = label_in(&reply[i + "answer is".len()..], &labels) {
            return Some(l);
        }
    }
    let r = norm(reply);
    if let Some((l, _)) = labels.iter().find(|(_, v)| norm(v) == r) {
        return Some(l.clone());
    }
    let mut hits = labels
        .iter()
        .filter(|(_, v)| !norm(v).is_empty() && lower.contains(&norm(v)));
    match (hits.next(), hits.next()) {
        (Some((l, _)), None) => Some(l.clone()),
        _ => None,
    }
}

/// Turn a raw reply into a [`FinalAnswer`], mapping onto options when the task has them.
pub fn finalize(task: &TaskInput, reply: &str, digest: String) -> FinalAnswer {
    let text = strip_answer_prefix(reply).to_string();
    if task.options.as_ref().is_some_and(|o| !o.is_empty()) {
        if let Some(label) = map_option(&text, task) {
            return FinalAnswer {
                text: label.clone(),
                chosen_option: Some(label),
                trace_digest: digest,
                warning: None,
            };
        }
        warn!(task = %task.id, reply = %text, "reply matches no option");
        return FinalAnswer {
            text,
            chosen_option: None,
            trace_digest: digest,
            warning: Some("reply could not be mapped to an option".into()),
        };
    }
    FinalAnswer {
        text,
        chosen_option: None,
        trace_digest: digest,
        warning: None,
    }
}

pub struct Synthesizer {
    prompts: Arc<PromptAssets>,
    decoding: DecodingConfig,
}

impl Synthesizer {
    pub fn new(prompts: Arc<PromptAssets>, decoding: DecodingConfig) -> Self {
        Self {
            prompts,
            decoding: decoding.with_stops(Vec::new()),
        }
    }

    /// One model call over the digest.
    pub fn synthesize(
        &self,
        task: &TaskInput,
        trace: &ReasoningTrace,
        model: &dyn ChatModel,
    ) -> Result<FinalAnswer, GatewayError> {
        let digest = build_digest(trace);
        let template = self
            .prompts
            .get("synthesizer")
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let prompt = render_template(
            template,
            &[("question", &task.question_block()), ("reasoning", &digest)],
        );
        let reply = model.complete(
            &[Message::user_with_image(task.image.as_ref(), prompt)],
            &self.decoding,
        )?;
        Ok(finalize(task, &reply.text, digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{InvocationRecord, Step, Termination, ToolResult};
    use crate::gateway::ScriptedModel;
    use crate::navigator::GlobalPlan;
    use crate::protocol::ToolKind;
    use std::time::Duration;

    fn tool_step(index: usize, reasoning: &str, tool: ToolKind, payload: &str, ok: bool, content: &str) -> Step {
        Step {
            index,
            reasoning: reasoning.into(),
            invocation: Some(InvocationRecord { tool, payload: payload.into() }),
            raw: format!("{reasoning}{} {payload} {}", tool.open_tag(), tool.close_tag()),
            result: Some(ToolResult {
                tool,
                ok,
                content: content.into(),
                wall_time: Duration::ZERO,
                revised_payload: None,
                failed_attempts: 0,
            }),
            status: if ok { StepStatus::ToolOk } else { StepStatus::ToolError },
            model_time: Duration::ZERO,
        }
    }

    fn final_step(index: usize, text: &str) -> Step {
        Step {
            index,
            reasoning: text.into(),
            invocation: None,
            raw: text.into(),
            result: None,
            status: StepStatus::FinalCandidate,
            model_time: Duration::ZERO,
        }
    }

    fn trace(task: TaskInput, steps: Vec<Step>) -> ReasoningTrace {
        ReasoningTrace {
            task,
            plan: GlobalPlan::direct("p"),
            turns_used: steps.len(),
            steps,
            terminated_by: Termination::FinalAnswer,
        }
    }

    #[test]
    fn option_reply_maps_to_label() {
        let task = TaskInput::new("t", "Which?").with_options(["Rome", "Paris", "Oslo", "Bern"]);
        let tr = trace(task.clone(), vec![final_step(1, "After checking, the answer is B.")]);
        let m = ScriptedModel::from_replies(["B"]).unwrap();
        let s = Synthesizer::new(Arc::new(PromptAssets::builtin()), DecodingConfig::default());
        let a = s.synthesize(&task, &tr, &m).unwrap();
        assert_eq!(a.text, "B");
        assert_eq!(a.chosen_option.as_deref(), Some("B"));
        assert_eq!(m.calls_made(), 1);
    }

    #[test]
    fn free_answer_verbatim() {
        let task = TaskInput::new("t", "Capital of France?");
        let tr = trace(task.clone(), vec![final_step(1, "It is Paris.")]);
        let m = ScriptedModel::from_replies(["Paris."]).unwrap();
        let s = Synthesizer::new(Arc::new(PromptAssets::builtin()), DecodingConfig::default());
        let a = s.synthesize(&task, &tr, &m).unwrap();
        assert_eq!(a.text, "Paris.");
        assert_eq!(a.chosen_option, None);
    }

    #[test]
    fn mapping_rules() {
        let task = TaskInput::new("t", "q").with_options(["red", "green", "dark green"]);
        assert_eq!(map_option("(B)", &task).as_deref(), Some("B"));
        assert_eq!(map_option("C. dark green", &task).as_deref(), Some("C"));
        assert_eq!(map_option("Answer: a", &task), None); // labels are case-sensitive
        assert_eq!(map_option("Red.", &task).as_deref(), Some("A"));
        assert_eq!(map_option("The answer is C", &task).as_deref(), Some("C"));
        assert_eq!(map_option("it looks reddish", &task).as_deref(), Some("A"));
        // "green" and "dark green" both appear: ambiguous
        assert_eq!(map_option("a dark green leaf", &task), None);
        let a = finalize(&task, "purple", String::new());
        assert_eq!(a.text, "purple");
        assert!(a.warning.is_some());
    }

    #[test]
    fn digest_drops_failed_payloads() {
        let task = TaskInput::new("t", "What is 6*7?");
        let steps = vec![
            tool_step(1, "Compute it. ", ToolKind::Code, "print(6*7", false, "SyntaxError: '(' was never closed\n  line 1"),
            tool_step(2, "Fix the call. ", ToolKind::Code, "print(6*7)", true, "42"),
            final_step(3, "The product is 42."),
        ];
        let expected = "Compute it. [Code call failed: SyntaxError: '(' was never closed]\n\
            Fix the call. <code> print(6*7) </code><result> 42 </result>\n\
            The product is 42.";
        assert_eq!(build_digest(&trace(task, steps)), expected);
    }

    #[test]
    fn digest_shows_revised_code_only() {
        let mut step = tool_step(1, "Run. ", ToolKind::Code, "print(6*7", true, "42");
        if let Some(r) = step.result.as_mut() {
            r.revised_payload = Some("print(6*7)".into());
            r.failed_attempts = 1;
        }
        let d = build_digest(&trace(TaskInput::new("t", "q"), vec![step]));
        assert_eq!(d, "[1 failed Code attempt(s) omitted]\nRun. <code> print(6*7) </code><result> 42 </result>\n");
        assert!(!d.contains("print(6*7\n") && !d.contains("print(6*7 "));
    }
}
