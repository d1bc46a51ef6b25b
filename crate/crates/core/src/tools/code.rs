//! Code tool: execute, and on failure ask the model for a revision.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Tool, ToolContext, ToolOutput, EMPTY_QUERY};
use crate::gateway::{ChatModel, DecodingConfig, Message};
use crate::prompts::PromptAssets;
use crate::protocol::{first_call, ToolKind};
use crate::sandbox::{ExecutionLimits, ExecutionResult, SandboxError, SnippetExecutor};
use crate::util::render_template;

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionHistory {
    pub attempts: Vec<(String, ExecutionResult)>,
    pub final_ok: bool,
}

/// Pull a snippet out of a revision reply: a `<code>` block, else a fenced
/// block, else the whole reply.
fn extract_snippet(reply: &str) -> String {
    if let Some((call, _)) = first_call(reply).filter(|(c, _)| c.tool == ToolKind::Code) {
        return call.payload;
    }
    if let Some(start) = reply.find("```") {
        let body = &reply[start + 3..];
        let body = body.split_once('\n').map_or(body, |(_, rest)| rest);
        let body = body.find("```").map_or(body, |end| &body[..end]);
        return body.trim().to_string();
    }
    reply.trim().to_string()
}

/// Valid means a clean exit that printed something.
fn is_valid(r: &ExecutionResult) -> bool {
    r.ok && !r.stdout.trim().is_empty()
}

pub struct FeedbackContext<'a> {
    pub question: &'a str,
    pub model: &'a dyn ChatModel,
    pub prompts: &'a PromptAssets,
    pub decoding: &'a DecodingConfig,
}

/// Run `snippet`; while it fails and retries remain, show the model the
/// failed code and its error and run the corrected version. At most
/// `max_retries + 1` executions.
pub fn run_with_feedback(
    snippet: &str,
    ctx: &FeedbackContext<'_>,
    executor: &dyn SnippetExecutor,
    limits: &ExecutionLimits,
    max_retries: u32,
) -> Result<(ToolOutput, RevisionHistory), SandboxError> {
    let mut attempts: Vec<(String, ExecutionResult)> = Vec::new();
    let mut current = snippet.to_string();
    let mut asked_to_print = false;
    let mut revision_error: Option<String> = None;

    loop {
        let result = executor.execute(&current, limits)?;
        let valid = is_valid(&result);
        attempts.push((current.clone(), result));
        if valid || attempts.len() > max_retries as usize {
            break;
        }
        let last = &attempts.last().expect("just pushed").1;
        let prompt = if last.ok {
            if asked_to_print {
                break;
            }
            asked_to_print = true;
            ctx.prompts
                .get("code_print")
                .map(|t| render_template(t, &[("question", ctx.question), ("code", &current)]))
        } else {
            ctx.prompts.get("code_revision").map(|t| {
                render_template(
                    t,
                    &[("question", ctx.question), ("code", &current), ("error", &last.error_text())],
                )
            })
        };
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => {
                revision_error = Some(e.to_string());
                break;
            }
        };
        match ctx.model.complete(&[Message::user_text(prompt)], ctx.decoding) {
            Ok(reply) => current = extract_snippet(&reply.text),
            Err(e) => {
                revision_error = Some(format!("code revision failed: {e}"));
                break;
            }
        }
        if current.is_empty() {
            revision_error = Some("revision contained no code".into());
            break;
        }
    }

    let (last_snippet, last) = attempts.last().expect("at least one attempt");
    let final_ok = is_valid(last);
    let failed_attempts = (attempts.len() - usize::from(final_ok)) as u32;
    let mut output = if final_ok {
        ToolOutput::ok(last.stdout.trim())
    } else if last.ok {
        ToolOutput::error("code ran but printed nothing")
    } else {
        ToolOutput::error(last.error_text())
    };
    if let (false, Some(e)) = (final_ok, revision_error) {
        output.content = format!("{}\n{e}", output.content);
    }
    if attempts.len() > 1 {
        output.revised_payload = Some(last_snippet.clone());
    }
    output.failed_attempts = failed_attempts;
    Ok((output, RevisionHistory { attempts, final_ok }))
}

pub struct CodeTool {
    executor: Arc<dyn SnippetExecutor>,
    limits: ExecutionLimits,
    max_retries: u32,
    prompts: Arc<PromptAssets>,
    decoding: DecodingConfig,
}

impl CodeTool {
    pub fn new(
        executor: Arc<dyn SnippetExecutor>,
        limits: ExecutionLimits,
        max_retries: u32,
        prompts: Arc<PromptAssets>,
        decoding: &DecodingConfig,
    ) -> Self {
        Self {
            executor,
            limits,
            max_retries,
            prompts,
            decoding: decoding.clone().with_stops(vec![ToolKind::Code.close_tag().to_string()]),
        }
    }
}

impl Tool for CodeTool {
    fn kind(&self) -> ToolKind {
        ToolKind::Code
    }

    fn invoke(&self, payload: &str, ctx: &ToolContext<'_>) -> ToolOutput {
        if payload.trim().is_empty() {
            return ToolOutput::error(EMPTY_QUERY);
        }
        let question = ctx.task.question_block();
        let fctx = FeedbackContext {
            question: &question,
            model: ctx.model,
            prompts: &self.prompts,
            decoding: &self.decoding,
        };
        match run_with_feedback(payload, &fctx, self.executor.as_ref(), &self.limits, self.max_retries) {
            Ok((out, _)) => out,
            Err(e) => ToolOutput::error(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedModel;
    use std::sync::Mutex;
    use std::time::Duration;

    /// Pretends to run Python: snippets containing "print(42)" succeed,
    /// "pass" exits cleanly with no output, anything else raises.
    struct FakeRunner {
        seen: Mutex<Vec<String>>,
    }

    impl FakeRunner {
        fn new() -> Self {
            Self { seen: Mutex::new(vec![]) }
        }
    }

    impl SnippetExecutor for FakeRunner {
        fn execute(&self, snippet: &str, _: &ExecutionLimits) -> Result<ExecutionResult, SandboxError> {
            self.seen.lock().unwrap().push(snippet.to_string());
            let (ok, stdout, stderr) = if snippet.contains("print(42)") {
                (true, "42\n", "")
            } else if snippet.trim() == "pass" {
                (true, "", "")
            } else {
                (false, "", "SyntaxError: invalid syntax")
            };
            Ok(ExecutionResult {
                ok,
                stdout: stdout.into(),
                stderr: stderr.into(),
                exit_status: if ok { 0 } else { 1 },
                duration: Duration::ZERO,
                killed_by_timeout: false,
            })
        }
    }

    fn run(snippet: &str, replies: &[&str], max_retries: u32) -> (ToolOutput, RevisionHistory, usize) {
        let model = ScriptedModel::from_replies(if replies.is_empty() { vec!["unused"] } else { replies.to_vec() }).unwrap();
        let prompts = PromptAssets::builtin();
        let decoding = DecodingConfig::default();
        let ctx = FeedbackContext { question: "q", model: &model, prompts: &prompts, decoding: &decoding };
        let (out, hist) = run_with_feedback(snippet, &ctx, &FakeRunner::new(), &ExecutionLimits::default(), max_retries).unwrap();
        (out, hist, model.calls_made())
    }

    #[test]
    fn syntax_error_then_fixed() {
        let (out, hist, calls) = run("print(42", &["Fixed: <code> print(42) </code>"], 3);
        assert!(out.ok);
        assert_eq!(out.content, "42");
        assert_eq!(hist.attempts.len(), 2);
        assert!(hist.final_ok);
        assert_eq!(calls, 1);
        assert_eq!(out.revised_payload.as_deref(), Some("print(42)"));
        assert_eq!(out.failed_attempts, 1);
    }

    #[test]
    fn no_retries() {
        let (out, hist, calls) = run("oops(", &[], 0);
        assert!(!out.ok);
        assert_eq!(hist.attempts.len(), 1);
        assert_eq!(calls, 0);
        assert!(out.content.contains("SyntaxError"));
    }

    #[test]
    fn valid_first_try_makes_no_model_call() {
        let (out, hist, calls) = run("print(42)", &[], 3);
        assert!(out.ok);
        assert_eq!((hist.attempts.len(), calls), (1, 0));
        assert_eq!(out.revised_payload, None);
    }

    #[test]
    fn silent_success_asks_once_to_print() {
        let (out, hist, calls) = run("pass", &["<code> print(42) </code>"], 3);
        assert!(out.ok);
        assert_eq!((hist.attempts.len(), calls), (2, 1));

        let (out, hist, calls) = run("pass", &["<code> pass </code>", "<code> pass </code>"], 3);
        assert!(!out.ok);
        assert_eq!((hist.attempts.len(), calls), (2, 1));
        assert_eq!(out.content, "code ran but printed nothing");
    }

    #[test]
    fn extraction_fallbacks() {
        assert_eq!(extract_snippet("<code> a = 1 </code>"), "a = 1");
        assert_eq!(extract_snippet("sure\n```python\nprint(1)\n```\n"), "print(1)");
        assert_eq!(extract_snippet("  print(2) "), "print(2)");
    }

    #[test]
    fn attempts_bounded_for_any_retry_count() {
        for max in 0..6u32 {
            let replies = vec!["<code> still broken </code>"; 8];
            let (out, hist, calls) = run("broken(", &replies, max);
            assert!(!out.ok);
            assert_eq!(hist.attempts.len(), max as usize + 1);
            assert_eq!(calls, max as usize);
        }
    }
}
