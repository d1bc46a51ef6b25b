//! Plan / execute / synthesize agent runtime for tool-augmented visual
//! question answering.
//!
//! A [`navigator::Navigator`] picks a toolkit subset and a global plan, an
//! [`executor::Executor`] runs a turn-budgeted reasoning loop that dispatches
//! `<search>`, `<perceive>` and `<code>` calls, and a
//! [`synthesizer::Synthesizer`] distills the trace into a final answer.
//! [`pipeline::Pipeline`] ties the three together; [`eval`] runs benchmarks.

pub mod clock;
pub mod config;
pub mod eval;
pub mod executor;
pub mod gateway;
pub mod navigator;
pub mod pipeline;
pub mod prompts;
pub mod protocol;
pub mod retrieval;
pub mod sandbox;
pub mod synthesizer;
pub mod task;
pub mod tools;
pub mod util;

pub use pipeline::{Pipeline, PipelineSettings, Resources, TraceLog};
pub use task::TaskInput;
