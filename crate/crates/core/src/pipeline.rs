//! Plan → execute → synthesize for one task, plus the direct-prompting
//! reference mode (one call, no tools).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{serde_secs, Clock, SystemClock};
use crate::executor::{
    Executor, ExecutorError, ReasoningTrace, Step, StepStatus, Termination, DEFAULT_MAX_TURNS,
};
use crate::gateway::{ChatModel, DecodingConfig, GatewayError, Message, MeteredModel};
use crate::navigator::{GlobalPlan, Navigator};
use crate::prompts::{PromptAssets, PromptError};
use crate::protocol::ToolKind;
use crate::retrieval::{Bm25Index, CrossModalIndex, RetrievalConfig};
use crate::sandbox::{ExecutionLimits, SnippetExecutor};
use crate::synthesizer::{finalize, FinalAnswer, Synthesizer};
use crate::task::TaskInput;
use crate::tools::{CodeTool, PerceiveTool, SearchTool, ToolRegistry};
use crate::util::render_template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Agent,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub mode: Mode,
    pub max_turns: usize,
    /// Tools offered to the planner, before intersecting with what is configured.
    pub pool: BTreeSet<ToolKind>,
    pub decoding: DecodingConfig,
    pub retrieval: RetrievalConfig,
    pub code_limits: ExecutionLimits,
    pub code_max_retries: u32,
    pub navigator_repairs: u32,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Agent,
            max_turns: DEFAULT_MAX_TURNS,
            pool: ToolKind::ALL.into_iter().collect(),
            decoding: DecodingConfig::default(),
            retrieval: RetrievalConfig::default(),
            code_limits: ExecutionLimits::default(),
            code_max_retries: crate::tools::DEFAULT_MAX_RETRIES,
            navigator_repairs: 1,
        }
    }
}

/// Shared, read-only resources. Cheap to clone.
#[derive(Clone)]
pub struct Resources {
    pub prompts: Arc<PromptAssets>,
    pub text_index: Option<Arc<Bm25Index>>,
    pub image_index: Option<Arc<CrossModalIndex>>,
    pub sandbox: Option<Arc<dyn SnippetExecutor>>,
    pub clock: Arc<dyn Clock>,
}

impl Default for Resources {
    fn default() -> Self {
        Self {
            prompts: Arc::new(PromptAssets::builtin()),
            text_index: None,
            image_index: None,
            sandbox: None,
            clock: Arc::new(SystemClock::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    #[serde(with = "serde_secs")]
    pub total: Duration,
    #[serde(with = "serde_secs")]
    pub model: Duration,
    pub model_calls: u64,
    #[serde(with = "tool_times")]
    pub tools: BTreeMap<ToolKind, Duration>,
}

mod tool_times {
    use std::collections::BTreeMap;
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::protocol::ToolKind;

    pub fn serialize<S: Serializer>(m: &BTreeMap<ToolKind, Duration>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, d)| (*k, d.as_secs_f64()))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<ToolKind, Duration>, D::Error> {
        let raw = BTreeMap::<ToolKind, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| Ok((k, Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)?)))
            .collect()
    }
}

/// Persisted record of one task: plan, steps, answer, timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub task: TaskInput,
    pub mode: Mode,
    pub plan: GlobalPlan,
    pub steps: Vec<Step>,
    pub terminated_by: Termination,
    pub turns_used: usize,
    pub answer: FinalAnswer,
    pub timings: Timings,
}

impl TraceLog {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error("synthesis failed: {0}")]
    Synthesis(GatewayError),
    #[error("direct answer failed: {0}")]
    Direct(GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub struct Pipeline {
    settings: PipelineSettings,
    resources: Resources,
    tools: ToolRegistry,
    navigator: Navigator,
    executor: Executor,
    synthesizer: Synthesizer,
}

impl Pipeline {
    pub fn new(settings: PipelineSettings, resources: Resources) -> Self {
        let prompts = resources.prompts.clone();
        let decoding = &settings.decoding;
        let mut tools = ToolRegistry::new();
        tools.register(Arc::new(PerceiveTool::new(prompts.clone(), decoding)));
        if resources.text_index.is_some() || resources.image_index.is_some() {
            tools.register(Arc::new(SearchTool::new(
                resources.text_index.clone(),
                resources.image_index.clone(),
                settings.retrieval.clone(),
                prompts.clone(),
                decoding,
            )));
        }
        if let Some(sandbox) = &resources.sandbox {
            tools.register(Arc::new(CodeTool::new(
                sandbox.clone(),
                settings.code_limits,
                settings.code_max_retries,
                prompts.clone(),
                decoding,
            )));
        }
        Self::with_tools(settings, resources, tools)
    }

    /// Use an explicit registry instead of the configured handlers.
    pub fn with_tools(settings: PipelineSettings, resources: Resources, tools: ToolRegistry) -> Self {
        let prompts = resources.prompts.clone();
        let mut navigator = Navigator::new(prompts.clone(), settings.decoding.clone());
        navigator.repair_attempts = settings.navigator_repairs;
        let executor = Executor::new(prompts.clone(), settings.decoding.clone(), resources.clock.clone());
        let synthesizer = Synthesizer::new(prompts, settings.decoding.clone());
        Self {
            settings,
            resources,
            tools,
            navigator,
            executor,
            synthesizer,
        }
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    /// Requested pool restricted to tools that have a handler.
    pub fn effective_pool(&self) -> BTreeSet<ToolKind> {
        let available: BTreeSet<_> = self.tools.kinds().collect();
        self.settings.pool.intersection(&available).copied().collect()
    }

    pub fn run(&self, task: &TaskInput, model: &dyn ChatModel) -> Result<TraceLog, PipelineError> {
        let metered = MeteredModel::new(model);
        let clock = &self.resources.clock;
        let started = clock.now();

        let (trace, answer) = match self.settings.mode {
            Mode::Agent => {
                let plan = self.navigator.plan(task, &self.effective_pool(), &metered);
                let trace = self
                    .executor
                    .run(task, &plan, &self.tools, &metered, self.settings.max_turns)?;
                let answer = self
                    .synthesizer
                    .synthesize(task, &trace, &metered)
                    .map_err(PipelineError::Synthesis)?;
                (trace, answer)
            }
            Mode::Direct => self.run_direct(task, &metered)?,
        };

        let total = clock.now().saturating_sub(started);
        let tools = ToolKind::ALL
            .into_iter()
            .map(|k| (k, trace.tool_time(k)))
            .filter(|(_, d)| !d.is_zero())
            .collect();
        let ReasoningTrace {
            task,
            plan,
            steps,
            terminated_by,
            turns_used,
        } = trace;
        Ok(TraceLog {
            task,
            mode: self.settings.mode,
            plan,
            steps,
            terminated_by,
            turns_used,
            answer,
            timings: Timings {
                total,
                model: metered.model_time(),
                model_calls: metered.calls(),
                tools,
            },
        })
    }

    fn run_direct(&self, task: &TaskInput, model: &dyn ChatModel) -> Result<(ReasoningTrace, FinalAnswer), PipelineError> {
        let prompt = render_template(
            self.resources.prompts.get("direct")?,
            &[("question", &task.question_block())],
        );
        let decoding = self.settings.decoding.clone().with_stops(Vec::new());
        let reply = model
            .complete(&[Message::user_with_image(task.image.as_ref(), prompt)], &decoding)
            .map_err(PipelineError::Direct)?;
        let step = Step {
            index: 1,
            reasoning: reply.text.clone(),
            invocation: None,
            raw: reply.text.clone(),
            result: None,
            status: StepStatus::FinalCandidate,
            model_time: reply.model_time,
        };
        let answer = finalize(task, &reply.text, reply.text.clone());
        let trace = ReasoningTrace {
            task: task.clone(),
            plan: GlobalPlan::direct(""),
            steps: vec![step],
            terminated_by: Termination::FinalAnswer,
            turns_used: 1,
        };
        Ok((trace, answer))
    }
}
