//! The reason / invoke / inject loop.
//!
//! Each turn renders the executor prompt with the accumulated context, asks
//! the model to continue (the three closers are stop sequences), and acts on
//! the first invocation in the completion. Tool output is appended right
//! after the closing tag as `<result> ... </result>` and the loop continues
//! until the model answers without a tool call or the turn budget runs out.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::clock::{serde_secs, Clock};
use crate::gateway::{ChatModel, DecodingConfig, GatewayError, Message};
use crate::navigator::GlobalPlan;
use crate::prompts::{PromptAssets, PromptError};
use crate::protocol::{first_call, ToolKind};
use crate::task::TaskInput;
use crate::tools::{ToolContext, ToolRegistry, EMPTY_QUERY};
use crate::util::render_template;

pub const DEFAULT_MAX_TURNS: usize = 10;

/// Order in which tool instruction blocks appear in the executor prompt.
const PROMPT_ORDER: [ToolKind; 3] = [ToolKind::Search, ToolKind::Perceive, ToolKind::Code];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: ToolKind,
    pub ok: bool,
    pub content: String,
    #[serde(with = "serde_secs")]
    pub wall_time: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_payload: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub failed_attempts: u32,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub tool: ToolKind,
    pub payload: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    ToolOk,
    ToolError,
    FinalCandidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    /// Model text before the invocation, or the whole reply for a final candidate.
    pub reasoning: String,
    pub invocation: Option<InvocationRecord>,
    /// Model text consumed by this step, tags included.
    pub raw: String,
    pub result: Option<ToolResult>,
    pub status: StepStatus,
    #[serde(with = "serde_secs")]
    pub model_time: Duration,
}

impl Step {
    /// This step as it appears in the running context.
    pub fn render(&self) -> String {
        match &self.result {
            Some(r) => format!("{}<result> {} </result>\n", self.raw, r.content),
            None => self.raw.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    FinalAnswer,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub task: TaskInput,
    pub plan: GlobalPlan,
    pub steps: Vec<Step>,
    pub terminated_by: Termination,
    pub turns_used: usize,
}

impl ReasoningTrace {
    pub fn tool_time(&self, kind: ToolKind) -> Duration {
        self.steps
            .iter()
            .filter_map(|s| s.result.as_ref())
            .filter(|r| r.tool == kind)
            .map(|r| r.wall_time)
            .sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("turn budget must be at least 1")]
    InvalidBudget,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("model call failed at turn {turn}: {source}")]
    Gateway {
        turn: usize,
        #[source]
        source: GatewayError,
    },
}

/// Context rendering of a step list, the `{previous_reasoning}` slot.
pub fn render_history(history: &[Step]) -> String {
    history.iter().map(Step::render).collect()
}

pub struct Executor {
    prompts: Arc<PromptAssets>,
    decoding: DecodingConfig,
    clock: Arc<dyn Clock>,
}

impl Executor {
    pub fn new(prompts: Arc<PromptAssets>, decoding: DecodingConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            prompts,
            decoding,
            clock,
        }
    }

    fn render_text(&self, task: &TaskInput, plan: &GlobalPlan, history: &[Step]) -> Result<String, PromptError> {
        let global_plan = if plan.global_plan.is_empty() {
            String::new()
        } else {
            format!("Global Plan: \n{}\n\n", plan.global_plan)
        };
        let previous = render_history(history);
        let question = task.question_block();
        if plan.is_tool_free() {
            return Ok(render_template(
                self.prompts.get("executor_no_tools")?,
                &[
                    ("question", &question),
                    ("global_plan", &global_plan),
                    ("previous_reasoning", &previous),
                ],
            ));
        }
        let mut descriptions = Vec::new();
        let mut usage = Vec::new();
        let mut examples = Vec::new();
        for (i, kind) in PROMPT_ORDER
            .iter()
            .filter(|k| plan.selected_tools.contains(k))
            .enumerate()
        {
            descriptions.push(format!("{}. {}", i + 1, self.prompts.tool("tool", *kind)?));
            usage.push(self.prompts.tool("usage", *kind)?.trim_end().to_string());
            examples.push(self.prompts.tool("example", *kind)?.trim_end().to_string());
        }
        Ok(render_template(
            self.prompts.get("executor")?,
            &[
                ("tool_descriptions", &descriptions.join("\n")),
                ("tool_usage", &usage.join(" ")),
                ("tool_examples", &examples.join("\n\n")),
                ("question", &question),
                ("global_plan", &global_plan),
                ("previous_reasoning", &previous),
            ],
        ))
    }

    /// Deterministic prompt for the next turn given the steps so far.
    pub fn render_prompt(
        &self,
        task: &TaskInput,
        plan: &GlobalPlan,
        history: &[Step],
    ) -> Result<Vec<Message>, PromptError> {
        let text = self.render_text(task, plan, history)?;
        Ok(vec![Message::user_with_image(task.image.as_ref(), text)])
    }

    pub fn run(
        &self,
        task: &TaskInput,
        plan: &GlobalPlan,
        tools: &ToolRegistry,
        model: &dyn ChatModel,
        max_turns: usize,
    ) -> Result<ReasoningTrace, ExecutorError> {
        if max_turns == 0 {
            return Err(ExecutorError::InvalidBudget);
        }
        // A tool-free plan gets exactly one direct turn with no tool stops.
        let (budget, decoding) = if plan.is_tool_free() {
            (1, self.decoding.clone().with_stops(Vec::new()))
        } else {
            (max_turns, self.decoding.clone().with_stops(ToolKind::closers()))
        };

        let mut steps: Vec<Step> = Vec::new();
        let mut terminated_by = Termination::BudgetExhausted;
        for turn in 1..=budget {
            let messages = self.render_prompt(task, plan, &steps)?;
            let completion = model
                .complete(&messages, &decoding)
                .map_err(|source| ExecutorError::Gateway { turn, source })?;
            let text = completion.text;

            let call = if plan.is_tool_free() { None } else { first_call(&text) };
            let Some((call, complete)) = call else {
                steps.push(Step {
                    index: turn,
                    reasoning: text.clone(),
                    invocation: None,
                    raw: text,
                    result: None,
                    status: StepStatus::FinalCandidate,
                    model_time: completion.model_time,
                });
                terminated_by = Termination::FinalAnswer;
                break;
            };

            // anything after the first invocation is dropped; the model
            // regenerates it after seeing the result
            let raw = text[..call.span.end].to_string();
            let reasoning = text[..call.span.start].to_string();
            let started = self.clock.now();
            let output = if !complete {
                crate::tools::ToolOutput::error(format!(
                    "unterminated {} invocation",
                    call.tool.open_tag()
                ))
            } else if call.payload.is_empty() {
                crate::tools::ToolOutput::error(EMPTY_QUERY)
            } else if !plan.selected_tools.contains(&call.tool) {
                crate::tools::ToolOutput::error(format!(
                    "tool '{}' is not available for this task",
                    call.tool
                ))
            } else if let Some(handler) = tools.get(call.tool) {
                let prior = format!("{}{}", render_history(&steps), reasoning);
                let ctx = ToolContext {
                    task,
                    prior_reasoning: &prior,
                    model,
                };
                handler.invoke(&call.payload, &ctx)
            } else {
                crate::tools::ToolOutput::error(format!(
                    "tool '{}' has no handler configured",
                    call.tool
                ))
            };
            let wall_time = self.clock.now().saturating_sub(started);
            debug!(task = %task.id, turn, tool = %call.tool, ok = output.ok, "tool step");

            steps.push(Step {
                index: turn,
                reasoning,
                invocation: Some(InvocationRecord {
                    tool: call.tool,
                    payload: call.payload,
                }),
                raw,
                status: if output.ok {
                    StepStatus::ToolOk
                } else {
                    StepStatus::ToolError
                },
                result: Some(ToolResult {
                    tool: call.tool,
                    ok: output.ok,
                    content: output.content,
                    wall_time,
                    revised_payload: output.revised_payload,
                    failed_attempts: output.failed_attempts,
                }),
                model_time: completion.model_time,
            });
        }

        let turns_used = steps.len();
        Ok(ReasoningTrace {
            task: task.clone(),
            plan: plan.clone(),
            steps,
            terminated_by,
            turns_used,
        })
    }
}
