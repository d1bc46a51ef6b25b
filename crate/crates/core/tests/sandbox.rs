mod common;

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::fixture;
use planexec::gateway::{DecodingConfig, ScriptedModel};
use planexec::prompts::PromptAssets;
use planexec::sandbox::{ExecutionLimits, SandboxError, SnippetExecutor, SubprocessSandbox, KILLED_STATUS};
use planexec::tools::{run_with_feedback, FeedbackContext};

fn shell_runner(dir: &Path, name: &str, body: &str) -> SubprocessSandbox {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    SubprocessSandbox::new(vec![path.to_str().unwrap().to_string()], 4).unwrap()
}

fn python_sandbox() -> SubprocessSandbox {
    let runner = fixture("runner.py");
    SubprocessSandbox::new(vec!["python3".into(), runner.to_str().unwrap().into()], 4).unwrap()
}

fn limits(secs: u64) -> ExecutionLimits {
    ExecutionLimits {
        wall_timeout: Duration::from_secs(secs),
        ..ExecutionLimits::default()
    }
}

#[test]
fn python_runner_reports_stdout() {
    let r = python_sandbox().execute("print(1+1)", &limits(10)).unwrap();
    assert!(r.ok);
    assert_eq!(r.stdout, "2\n");
    assert_eq!(r.exit_status, 0);
}

#[test]
fn python_runner_reports_traceback() {
    let r = python_sandbox().execute("x = 1\n1/0\n", &limits(10)).unwrap();
    assert!(!r.ok);
    assert_eq!(r.exit_status, 1);
    assert!(r.stderr.contains("Traceback"));
    assert!(r.stderr.contains("ZeroDivisionError"));
}

#[test]
fn python_runner_fresh_namespace() {
    let sb = python_sandbox();
    sb.execute("leak = 5\nprint(leak)", &limits(10)).unwrap();
    let r = sb.execute("print(leak)", &limits(10)).unwrap();
    assert!(!r.ok);
    assert!(r.stderr.contains("NameError"));
}

#[test]
fn infinite_loop_killed_near_deadline() {
    let started = Instant::now();
    let r = python_sandbox().execute("while True:\n    pass\n", &limits(5)).unwrap();
    let elapsed = started.elapsed();
    assert!(r.killed_by_timeout);
    assert!(!r.ok);
    assert_eq!(r.exit_status, KILLED_STATUS);
    assert!(elapsed >= Duration::from_secs(5) && elapsed < Duration::from_secs(6), "{elapsed:?}");
}

fn pid_alive(pid: i32) -> bool {
    // zombie entries count as dead
    std::fs::read_to_string(format!("/proc/{pid}/stat"))
        .map(|s| !s.split(") ").nth(1).unwrap_or("").starts_with('Z'))
        .unwrap_or(false)
}

#[test]
fn timeout_kills_the_process_group() {
    let dir = tempfile::tempdir().unwrap();
    let pidfile = dir.path().join("pid");
    let sb = shell_runner(dir.path(), "r.sh", &format!("sleep 60 &\necho $! > {}\nwait", pidfile.display()));
    let r = sb.execute("x", &limits(1)).unwrap();
    assert!(r.killed_by_timeout);
    let pid: i32 = std::fs::read_to_string(&pidfile).unwrap().trim().parse().unwrap();
    let deadline = Instant::now() + Duration::from_secs(2);
    while pid_alive(pid) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(!pid_alive(pid), "grandchild {pid} survived");
}

#[test]
fn output_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let sb = shell_runner(
        dir.path(),
        "r.sh",
        r#"python3 -c 'import json; print(json.dumps({"ok": True, "stdout": "x" * 100000, "stderr": "", "duration_ms": 1}))'"#,
    );
    let r = sb.execute("x", &limits(10)).unwrap();
    assert!(r.stdout.starts_with(&"x".repeat(65536)));
    assert!(r.stdout.ends_with("[output truncated at 65536 bytes]"));
    assert!(r.stdout.len() < 65536 + 64);
}

#[test]
fn harness_faults_are_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let crash = shell_runner(dir.path(), "crash.sh", "echo boom >&2\nexit 3");
    match crash.execute("x", &limits(10)) {
        Err(SandboxError::Unavailable(m)) => assert!(m.contains("boom")),
        other => panic!("{other:?}"),
    }
    let silent = shell_runner(dir.path(), "silent.sh", "echo not-json");
    assert!(matches!(silent.execute("x", &limits(10)), Err(SandboxError::Unavailable(_))));
}

#[test]
fn scratch_dir_is_cwd_home_and_removed() {
    let dir = tempfile::tempdir().unwrap();
    let sb = shell_runner(
        dir.path(),
        "r.sh",
        r#"test "$HOME" = "$PWD" || exit 9
test -f "$1" || exit 8
test "$2" = "10" || exit 7
printf '{"ok": true, "stdout": "%s", "stderr": "", "duration_ms": 0}\n' "$PWD""#,
    );
    let r = sb.execute("x", &limits(10)).unwrap();
    let scratch = PathBuf::from(&r.stdout);
    assert!(scratch.file_name().unwrap().to_str().unwrap().starts_with("planexec-run-"));
    assert!(!scratch.exists());
}

#[test]
fn concurrent_executions_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.sh");
    std::fs::write(&path, "#!/bin/sh\nsleep 0.3\necho '{\"ok\": true, \"stdout\": \"1\", \"stderr\": \"\", \"duration_ms\": 0}'\n").unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    let sb = Arc::new(SubprocessSandbox::new(vec![path.to_str().unwrap().into()], 2).unwrap());
    let started = Instant::now();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let sb = sb.clone();
            std::thread::spawn(move || sb.execute("x", &limits(10)).unwrap())
        })
        .collect();
    for h in handles {
        assert!(h.join().unwrap().ok);
    }
    // four 0.3 s runs through two slots need two rounds
    assert!(started.elapsed() >= Duration::from_millis(600));
}

#[test]
fn revision_loop_through_real_runner() {
    let model = ScriptedModel::from_replies(["<code> print(6*7) </code>"]).unwrap();
    let prompts = PromptAssets::builtin();
    let decoding = DecodingConfig::default();
    let ctx = FeedbackContext {
        question: "What is 6*7?",
        model: &model,
        prompts: &prompts,
        decoding: &decoding,
    };
    let (out, hist) = run_with_feedback("print(6*7", &ctx, &python_sandbox(), &limits(10), 3).unwrap();
    assert!(out.ok);
    assert_eq!(out.content, "42");
    assert_eq!(hist.attempts.len(), 2);
    assert!(hist.attempts[0].1.stderr.contains("SyntaxError"));
}
