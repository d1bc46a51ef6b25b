//! Toolkit selection and global guidance, produced by a single planning call.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::gateway::{ChatModel, DecodingConfig, Message, Part, Role};
use crate::prompts::{PromptAssets, PromptError};
use crate::protocol::ToolKind;
use crate::task::TaskInput;
use crate::util::render_template;

/// Catalog order used when listing tools to the planner.
const CATALOG_ORDER: [ToolKind; 3] = [ToolKind::Search, ToolKind::Code, ToolKind::Perceive];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalPlan {
    pub selected_tools: BTreeSet<ToolKind>,
    pub global_plan: String,
    /// The model reply this plan was taken from, verbatim.
    pub raw: String,
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl GlobalPlan {
    /// Plan used when no usable reply was obtained: every offered tool, no guidance.
    pub fn fallback(pool: &BTreeSet<ToolKind>, raw: String, warnings: Vec<String>) -> Self {
        Self {
            selected_tools: pool.clone(),
            global_plan: String::new(),
            raw,
            fallback: true,
            warnings,
        }
    }

    pub fn direct(global_plan: impl Into<String>) -> Self {
        Self {
            selected_tools: BTreeSet::new(),
            global_plan: global_plan.into(),
            raw: String::new(),
            fallback: false,
            warnings: Vec::new(),
        }
    }

    /// True when the planner chose to answer without tools.
    pub fn is_tool_free(&self) -> bool {
        self.selected_tools.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanParseError {
    #[error("no JSON object found in reply")]
    NoObject,
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("field '{0}' missing or of the wrong type")]
    Field(&'static str),
}

/// Strip fences and surrounding prose, then parse. Returns the selected tools
/// (unfiltered), the plan text, and per-name warnings.
pub fn parse_plan_reply(
    reply: &str,
    pool: &BTreeSet<ToolKind>,
) -> Result<(BTreeSet<ToolKind>, String, Vec<String>), PlanParseError> {
    let start = reply.find('{').ok_or(PlanParseError::NoObject)?;
    let end = reply.rfind('}').ok_or(PlanParseError::NoObject)?;
    if end < start {
        return Err(PlanParseError::NoObject);
    }
    let value: Value = serde_json::from_str(&reply[start..=end])
        .map_err(|e| PlanParseError::Json(e.to_string()))?;
    let names = value
        .get("selected_tools")
        .and_then(Value::as_array)
        .ok_or(PlanParseError::Field("selected_tools"))?;
    let plan = value
        .get("global_plan")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or(PlanParseError::Field("global_plan"))?;

    let mut tools = BTreeSet::new();
    let mut warnings = Vec::new();
    for name in names {
        let Some(name) = name.as_str() else {
            warnings.push(format!("dropped non-string tool entry {name}"));
            continue;
        };
        match name.parse::<ToolKind>() {
            Ok(kind) if pool.contains(&kind) => {
                tools.insert(kind);
            }
            Ok(kind) => warnings.push(format!("dropped tool '{kind}' outside the offered pool")),
            Err(_) => warnings.push(format!("dropped unknown tool '{name}'")),
        }
    }
    Ok((tools, plan.to_string(), warnings))
}

pub struct Navigator {
    prompts: Arc<PromptAssets>,
    decoding: DecodingConfig,
    /// Re-prompts after an unparseable reply.
    pub repair_attempts: u32,
}

impl Navigator {
    pub fn new(prompts: Arc<PromptAssets>, decoding: DecodingConfig) -> Self {
        Self {
            prompts,
            decoding: decoding.with_stops(Vec::new()),
            repair_attempts: 1,
        }
    }

    pub fn render(&self, task: &TaskInput, pool: &BTreeSet<ToolKind>) -> Result<String, PromptError> {
        let mut catalog = Vec::new();
        for (i, kind) in CATALOG_ORDER.iter().filter(|k| pool.contains(k)).enumerate() {
            catalog.push(format!("{}. {}", i + 1, self.prompts.tool("catalog", *kind)?));
        }
        let catalog = if catalog.is_empty() {
            "(none)".to_string()
        } else {
            catalog.join("\n")
        };
        Ok(render_template(
            self.prompts.get("navigator")?,
            &[("tool_catalog", &catalog), ("question", &task.question_block())],
        ))
    }

    fn render_repair(&self, task: &TaskInput, pool: &BTreeSet<ToolKind>) -> Result<String, PromptError> {
        let names = CATALOG_ORDER
            .iter()
            .filter(|k| pool.contains(k))
            .map(|k| format!("\"{k}\""))
            .collect::<Vec<_>>()
            .join(", ");
        Ok(render_template(
            self.prompts.get("navigator_repair")?,
            &[("tool_names", &names), ("question", &task.question_block())],
        ))
    }

    /// Never fails: every error path ends in [`GlobalPlan::fallback`].
    pub fn plan(&self, task: &TaskInput, pool: &BTreeSet<ToolKind>, model: &dyn ChatModel) -> GlobalPlan {
        let mut warnings = Vec::new();
        let prompt = match self.render(task, pool) {
            Ok(p) => p,
            Err(e) => {
                warnings.push(format!("navigator prompt unavailable: {e}"));
                return GlobalPlan::fallback(pool, String::new(), warnings);
            }
        };
        let mut messages = vec![Message::user_with_image(task.image.as_ref(), prompt)];
        let mut last_reply = String::new();

        for attempt in 0..=self.repair_attempts {
            if attempt > 0 {
                match self.render_repair(task, pool) {
                    Ok(repair) => {
                        messages.push(Message {
                            role: Role::Assistant,
                            parts: vec![Part::Text(last_reply.clone())],
                        });
                        messages.push(Message::user_text(repair));
                    }
                    Err(e) => {
                        warnings.push(format!("repair prompt unavailable: {e}"));
                        break;
                    }
                }
            }
            let reply = match model.complete(&messages, &self.decoding) {
                Ok(c) => c.text,
                Err(e) => {
                    warn!(task = %task.id, error = %e, "navigator call failed");
                    warnings.push(format!("navigator call failed: {e}"));
                    break;
                }
            };
            match parse_plan_reply(&reply, pool) {
                Ok((selected_tools, global_plan, mut notes)) => {
                    for n in &notes {
                        warn!(task = %task.id, "{n}");
                    }
                    warnings.append(&mut notes);
                    return GlobalPlan {
                        selected_tools,
                        global_plan,
                        raw: reply,
                        fallback: false,
                        warnings,
                    };
                }
                Err(e) => {
                    warnings.push(format!("unparseable plan (attempt {}): {e}", attempt + 1));
                    last_reply = reply;
                }
            }
        }
        GlobalPlan::fallback(pool, last_reply, warnings)
    }
}
