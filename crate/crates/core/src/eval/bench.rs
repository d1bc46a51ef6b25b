use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::dataset::Example;
use super::metrics::p50_duration;
use super::EvalError;
use crate::clock::serde_secs;
use crate::gateway::{ChatModel, GatewayError, ScriptedModel};
use crate::pipeline::{Pipeline, PipelineSettings, Resources};
use crate::protocol::ToolKind;
use crate::synthesizer::FinalAnswer;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";
const REPORT_TABLE_FILE: &str = "report.txt";
const CONFIG_FILE: &str = "config.json";
const TRACE_DIR: &str = "traces";

/// Hands each example its model. Scripted mocks are stateful, so every
/// example gets a fresh one.
pub trait ModelSource: Send + Sync {
    fn model_for(&self, example: &Example) -> Result<Arc<dyn ChatModel>, GatewayError>;
}

/// One model shared by all examples.
pub struct SharedModel(pub Arc<dyn ChatModel>);

impl ModelSource for SharedModel {
    fn model_for(&self, _: &Example) -> Result<Arc<dyn ChatModel>, GatewayError> {
        Ok(self.0.clone())
    }
}

/// Mock scripts on disk: a single file replayed for every example, or a
/// directory holding `<id>.json` per example.
#[derive(Debug, Clone)]
pub enum ScriptSource {
    File(PathBuf),
    Dir(PathBuf),
}

impl ScriptSource {
    pub fn from_path(path: &Path) -> Self {
        if path.is_dir() {
            Self::Dir(path.to_path_buf())
        } else {
            Self::File(path.to_path_buf())
        }
    }
}

impl ModelSource for ScriptSource {
    fn model_for(&self, example: &Example) -> Result<Arc<dyn ChatModel>, GatewayError> {
        let path = match self {
            Self::File(p) => p.clone(),
            Self::Dir(d) => d.join(format!("{}.json", example.id)),
        };
        Ok(Arc::new(ScriptedModel::from_file(&path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub prediction: FinalAnswer,
    pub correct: bool,
    pub turns_used: usize,
    #[serde(with = "serde_secs")]
    pub total_latency: Duration,
    #[serde(with = "serde_secs")]
    pub model_time: Duration,
    pub tool_time: BTreeMap<ToolKind, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    fn failed(id: &str, error: String) -> Self {
        Self {
            id: id.to_string(),
            prediction: FinalAnswer {
                text: String::new(),
                chosen_option: None,
                trace_digest: String::new(),
                warning: None,
            },
            correct: false,
            turns_used: 0,
            total_latency: Duration::ZERO,
            model_time: Duration::ZERO,
            tool_time: BTreeMap::new(),
            error: Some(error),
        }
    }
}

/// Aggregate over a run: accuracy plus the Turns / Latency / MLLM Time columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub errors: usize,
    pub avg_turns: f64,
    #[serde(with = "serde_secs")]
    pub latency_p50: Duration,
    #[serde(with = "serde_secs")]
    pub model_time_p50: Duration,
    /// Summed wall time per tool over the run, in seconds.
    pub tool_totals: BTreeMap<ToolKind, f64>,
    pub config: serde_json::Value,
}

impl Report {
    pub fn from_records(records: &[RunRecord], config: serde_json::Value) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        let n = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let turns: usize = records.iter().map(|r| r.turns_used).sum();
        let latencies: Vec<_> = records.iter().map(|r| r.total_latency).collect();
        let model: Vec<_> = records.iter().map(|r| r.model_time).collect();
        let mut tool_totals = BTreeMap::new();
        for r in records {
            for (k, v) in &r.tool_time {
                *tool_totals.entry(*k).or_insert(0.0) += v;
            }
        }
        Ok(Self {
            examples: n,
            correct,
            accuracy: correct as f64 / n as f64,
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            avg_turns: turns as f64 / n as f64,
            latency_p50: p50_duration(&latencies)?,
            model_time_p50: p50_duration(&model)?,
            tool_totals,
            config,
        })
    }

    pub fn table_header() -> &'static str {
        "Examples  Accuracy  Turns  Latency (s)  MLLM Time (s)"
    }

    /// Fixed-width summary; latency columns are p50 over the run.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::table_header());
        let _ = writeln!(
            s,
            "{:<8}  {:<8.3}  {:<5.2}  {:<11.3}  {:.3}",
            self.examples,
            self.accuracy,
            self.avg_turns,
            self.latency_p50.as_secs_f64(),
            self.model_time_p50.as_secs_f64()
        );
        for (tool, secs) in &self.tool_totals {
            let _ = writeln!(s, "{tool} time total (s): {secs:.3}");
        }
        if self.errors > 0 {
            let _ = writeln!(s, "errors: {}", self.errors);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub concurrency: usize,
    /// Run directory for traces, records, report and config snapshot.
    pub out_dir: Option<PathBuf>,
    /// Extra configuration recorded with the report.
    pub config_snapshot: serde_json::Value,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            concurrency: 1,
            out_dir: None,
            config_snapshot: serde_json::Value::Null,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn run_one(example: &Example, pipeline: &Pipeline, models: &dyn ModelSource, traces: Option<&Path>) -> RunRecord {
    let model = match models.model_for(example) {
        Ok(m) => m,
        Err(e) => return RunRecord::failed(&example.id, format!("model: {e}")),
    };
    let log = match pipeline.run(&example.task(), model.as_ref()) {
        Ok(log) => log,
        Err(e) => {
            warn!(id = %example.id, error = %e, "example failed");
            return RunRecord::failed(&example.id, e.to_string());
        }
    };
    if let Some(dir) = traces {
        let path = dir.join(format!("{}.json", file_stem(&example.id)));
        if let Err(e) = std::fs::write(&path, log.to_json()) {
            warn!(path = %path.display(), error = %e, "cannot write trace");
        }
    }
    RunRecord {
        id: example.id.clone(),
        correct: example.score(&log.answer),
        prediction: log.answer,
        turns_used: log.turns_used,
        total_latency: log.timings.total,
        model_time: log.timings.model,
        tool_time: log.timings.tools.iter().map(|(k, d)| (*k, d.as_secs_f64())).collect(),
        error: None,
    }
}

/// Run every example through `pipeline` with at most `concurrency` workers.
/// Records come back in dataset order.
pub fn run_benchmark(
    examples: &[Example],
    pipeline: &Pipeline,
    models: &dyn ModelSource,
    opts: &BenchOptions,
) -> Result<(Report, Vec<RunRecord>), EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let config = serde_json::json!({
        "settings": pipeline.settings(),
        "concurrency": opts.concurrency,
        "app": opts.config_snapshot,
    });
    let traces = match &opts.out_dir {
        Some(dir) => {
            let t = dir.join(TRACE_DIR);
            std::fs::create_dir_all(&t).map_err(io_err(&t))?;
            write_file(&dir.join(CONFIG_FILE), &format!("{:#}\n", config))?;
            Some(t)
        }
        None => None,
    };

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<RunRecord>>> = examples.iter().map(|_| Mutex::new(None)).collect();
    let workers = opts.concurrency.clamp(1, examples.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(example) = examples.get(i) else { break };
                let record = run_one(example, pipeline, models, traces.as_deref());
                *slots[i].lock().expect("slot poisoned") = Some(record);
            });
        }
    });
    let records: Vec<RunRecord> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("every example ran"))
        .collect();

    let report = Report::from_records(&records, config)?;
    if let Some(dir) = &opts.out_dir {
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r).expect("record serializes"));
            lines.push('\n');
        }
        write_file(&dir.join(RECORDS_FILE), &lines)?;
        write_file(&dir.join(REPORT_FILE), &format!("{:#}\n", serde_json::to_value(&report).expect("report serializes")))?;
        write_file(&dir.join(REPORT_TABLE_FILE), &report.render_table())?;
    }
    info!(accuracy = report.accuracy, examples = report.examples, "benchmark finished");
    Ok((report, records))
}

/// Read `records.jsonl` (and `config.json` when present) from a run directory.
pub fn load_records(dir: &Path) -> Result<(Vec<RunRecord>, serde_json::Value), EvalError> {
    let path = dir.join(RECORDS_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(EvalError::NoRecords(dir.to_path_buf())),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).map_err(|e| EvalError::Dataset {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if records.is_empty() {
        return Err(EvalError::NoRecords(dir.to_path_buf()));
    }
    let config = std::fs::read_to_string(dir.join(CONFIG_FILE))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(serde_json::Value::Null);
    Ok((records, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    TopK,
    MaxTurns,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::TopK => "top_k",
            Self::MaxTurns => "max_turns",
        }
    }

    fn apply(self, settings: &mut PipelineSettings, value: usize) {
        match self {
            Self::TopK => settings.retrieval.top_k = value,
            Self::MaxTurns => settings.max_turns = value,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "top_k" => Ok(Self::TopK),
            "max_turns" => Ok(Self::MaxTurns),
            other => Err(format!("cannot sweep '{other}' (expected top_k or max_turns)")),
        }
    }
}

/// One benchmark per value with everything else fixed. With an output
/// directory, each value gets its own run directory and `sweep.csv` is written.
pub fn sweep(
    param: SweepParam,
    values: &[usize],
    examples: &[Example],
    settings: &PipelineSettings,
    resources: &Resources,
    models: &dyn ModelSource,
    opts: &BenchOptions,
) -> Result<Vec<(usize, Report)>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoSweepValues);
    }
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut s = settings.clone();
        param.apply(&mut s, value);
        let pipeline = Pipeline::new(s, resources.clone());
        let run_opts = BenchOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("{}_{value}", param.name()))),
            ..opts.clone()
        };
        let (report, _) = run_benchmark(examples, &pipeline, models, &run_opts)?;
        out.push((value, report));
    }
    if let Some(dir) = &opts.out_dir {
        write_file(&dir.join("sweep.csv"), &sweep_csv(param, &out))?;
    }
    Ok(out)
}

pub fn sweep_csv(param: SweepParam, rows: &[(usize, Report)]) -> String {
    let mut s = format!("{},accuracy,avg_turns,latency_p50\n", param.name());
    for (v, r) in rows {
        let _ = writeln!(s, "{v},{},{},{}", r.accuracy, r.avg_turns, r.latency_p50.as_secs_f64());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FrozenClock;

    fn example(id: &str, gold: &str) -> Example {
        Example {
            id: id.into(),
            image: None,
            question: "q".into(),
            options: None,
            gold: gold.into(),
            split: None,
            tags: vec![],
        }
    }

    /// Replies "a" for ids starting with "a", else "b".
    struct ByPrefix;

    impl ModelSource for ByPrefix {
        fn model_for(&self, ex: &Example) -> Result<Arc<dyn ChatModel>, GatewayError> {
            let answer = if ex.id.starts_with('a') { "a" } else { "b" };
            Ok(Arc::new(ScriptedModel::from_replies([
                r#"{"selected_tools": [], "global_plan": "Answer."}"#.to_string(),
                format!("It is {answer}."),
                answer.to_string(),
            ])?))
        }
    }

    fn pipeline(max_turns: usize) -> Pipeline {
        let settings = PipelineSettings {
            max_turns,
            ..PipelineSettings::default()
        };
        Pipeline::new(settings, Resources { clock: Arc::new(FrozenClock), ..Resources::default() })
    }

    #[test]
    fn accuracy_counts_and_order() {
        let exs = vec![example("a1", "a"), example("b1", "a"), example("a2", "a"), example("b2", "b")];
        for concurrency in [1, 3, 8] {
            let opts = BenchOptions { concurrency, ..BenchOptions::default() };
            let (report, records) = run_benchmark(&exs, &pipeline(10), &ByPrefix, &opts).unwrap();
            assert_eq!(report.accuracy, 0.75);
            assert_eq!(report.avg_turns, 1.0);
            let ids: Vec<_> = records.iter().map(|r| r.id.as_str()).collect();
            assert_eq!(ids, ["a1", "b1", "a2", "b2"]);
        }
    }

    #[test]
    fn failures_are_recorded_and_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ok.json"), r#"[{"reply": "{\"selected_tools\": [], \"global_plan\": \"x\"}"}, {"reply": "r"}, {"reply": "yes"}]"#).unwrap();
        let exs = vec![example("ok", "yes"), example("missing", "yes")];
        let (report, records) = run_benchmark(&exs, &pipeline(10), &ScriptSource::Dir(dir.path().into()), &BenchOptions::default()).unwrap();
        assert_eq!((report.correct, report.errors), (1, 1));
        assert!(records[1].error.as_deref().unwrap().contains("missing.json"));
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(
            run_benchmark(&[], &pipeline(10), &ByPrefix, &BenchOptions::default()),
            Err(EvalError::EmptyDataset)
        ));
    }

    #[test]
    fn outputs_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BenchOptions { out_dir: Some(dir.path().into()), ..BenchOptions::default() };
        let exs = vec![example("a/1", "a")];
        let (report, _) = run_benchmark(&exs, &pipeline(10), &ByPrefix, &opts).unwrap();
        assert!(dir.path().join("traces/a_1.json").exists());
        let (records, config) = load_records(dir.path()).unwrap();
        assert_eq!(Report::from_records(&records, config).unwrap(), report);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_records(empty.path()), Err(EvalError::NoRecords(_))));
    }

    #[test]
    fn sweep_one_report_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BenchOptions { out_dir: Some(dir.path().into()), ..BenchOptions::default() };
        let exs = vec![example("a1", "a"), example("b1", "a")];
        let values = [1, 2, 4, 6, 8, 10];
        let res = sweep(SweepParam::MaxTurns, &values, &exs, &PipelineSettings::default(),
            &Resources { clock: Arc::new(FrozenClock), ..Resources::default() }, &ByPrefix, &opts).unwrap();
        assert_eq!(res.len(), 6);
        assert!(res.iter().all(|(_, r)| r.accuracy == 0.5));
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("max_turns,accuracy,avg_turns,latency_p50\n1,0.5,1,0\n"));
        assert!(matches!(
            sweep(SweepParam::TopK, &[], &exs, &PipelineSettings::default(), &Resources::default(), &ByPrefix, &opts),
            Err(EvalError::NoSweepValues)
        ));
    }

    #[test]
    fn table_has_latency_columns() {
        let r = Report::from_records(&[RunRecord::failed("x", "e".into())], serde_json::Value::Null).unwrap();
        let t = r.render_table();
        for col in ["Turns", "Latency", "MLLM Time", "Accuracy"] {
            assert!(t.contains(col));
        }
    }
}
