//! Tool handlers dispatched by the executor.

mod code;
mod perceive;
mod search;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::gateway::ChatModel;
use crate::protocol::ToolKind;
use crate::task::TaskInput;

pub use code::{run_with_feedback, CodeTool, FeedbackContext, RevisionHistory, DEFAULT_MAX_RETRIES};
pub use perceive::{perceive, PerceiveTool};
pub use search::{refine, SearchTool, NO_DOCUMENTS};

/// What a handler sees of the ongoing trace.
pub struct ToolContext<'a> {
    pub task: &'a TaskInput,
    /// Rendered reasoning so far, up to the invocation being served.
    pub prior_reasoning: &'a str,
    pub model: &'a dyn ChatModel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub ok: bool,
    pub content: String,
    /// The payload that actually produced `content`, when the handler revised it.
    pub revised_payload: Option<String>,
    pub failed_attempts: u32,
}

impl ToolOutput {
    pub fn ok(content: impl Into<String>) -> Self {
        Self {
            ok: true,
            content: content.into(),
            revised_payload: None,
            failed_attempts: 0,
        }
    }

    pub fn error(content: impl Into<String>) -> Self {
        Self {
            ok: false,
            content: content.into(),
            revised_payload: None,
            failed_attempts: 0,
        }
    }
}

pub const EMPTY_QUERY: &str = "empty tool query";

pub trait Tool: Send + Sync {
    fn kind(&self) -> ToolKind;
    fn invoke(&self, payload: &str, ctx: &ToolContext<'_>) -> ToolOutput;
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    handlers: BTreeMap<ToolKind, Arc<dyn Tool>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Arc<dyn Tool>) -> &mut Self {
        self.handlers.insert(tool.kind(), tool);
        self
    }

    pub fn with(mut self, tool: Arc<dyn Tool>) -> Self {
        self.register(tool);
        self
    }

    pub fn get(&self, kind: ToolKind) -> Option<&Arc<dyn Tool>> {
        self.handlers.get(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = ToolKind> + '_ {
        self.handlers.keys().copied()
    }
}
