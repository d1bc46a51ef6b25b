#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use planexec::clock::FrozenClock;
use planexec::eval::{load_dataset, run_benchmark, BenchOptions, Report, ScriptSource};
use planexec::gateway::ScriptedModel;
use planexec::retrieval::{ingest_dump, read_documents, RetrievalConfig};
use planexec::{Pipeline, PipelineSettings, Resources, TaskInput, TraceLog};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn golden_resources() -> Resources {
    let cfg = RetrievalConfig::default();
    let docs = read_documents(&fixture("golden/corpus.jsonl")).unwrap();
    let (index, _) = ingest_dump(docs, cfg.chunk_size, cfg.chunk_overlap, cfg.bm25_params(), None).unwrap();
    Resources {
        text_index: Some(Arc::new(index)),
        clock: Arc::new(FrozenClock),
        ..Resources::default()
    }
}

pub fn golden_run() -> TraceLog {
    let task: TaskInput =
        serde_json::from_str(&std::fs::read_to_string(fixture("golden/task.json")).unwrap()).unwrap();
    let model = ScriptedModel::from_file(&fixture("golden/script.json")).unwrap();
    let pipeline = Pipeline::new(PipelineSettings::default(), golden_resources());
    let log = pipeline.run(&task, &model).unwrap();
    assert_eq!(model.calls_made(), model.len(), "script not fully consumed");
    log
}

pub fn scripted_bench(concurrency: usize) -> Report {
    let examples = load_dataset(&fixture("bench/dataset.jsonl")).unwrap();
    let pipeline = Pipeline::new(
        PipelineSettings::default(),
        Resources {
            clock: Arc::new(FrozenClock),
            ..Resources::default()
        },
    );
    let opts = BenchOptions {
        concurrency,
        ..BenchOptions::default()
    };
    let (report, _) = run_benchmark(&examples, &pipeline, &ScriptSource::Dir(fixture("bench/scripts")), &opts).unwrap();
    report
}
