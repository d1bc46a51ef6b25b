//! Snippet execution in a child process.
//!
//! The orchestrator side of the runner handshake: write the snippet into a
//! fresh scratch directory, start the runner with `(snippet path, timeout
//! seconds)`, enforce the wall-clock limit by killing the whole process
//! group, and read the runner's report from the last line of its stdout:
//!
//! ```json
//! {"ok": true, "stdout": "2\n", "stderr": "", "duration_ms": 3}
//! ```
//!
//! A runner that exits nonzero or prints no parseable report is a harness
//! fault and maps to [`SandboxError::Unavailable`], never to a failed snippet.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::serde_secs;
use crate::util::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLimits {
    #[serde(with = "serde_secs")]
    pub wall_timeout: Duration,
    pub output_cap: usize,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            wall_timeout: Duration::from_secs(10),
            output_cap: 64 * 1024,
        }
    }
}

/// Exit status recorded for a run killed at the deadline (128 + SIGKILL).
pub const KILLED_STATUS: i32 = 137;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub ok: bool,
    pub stdout: String,
    pub stderr: String,
    /// 0 when the snippet completed cleanly, 1 when it raised, [`KILLED_STATUS`] on timeout.
    pub exit_status: i32,
    #[serde(with = "serde_secs")]
    pub duration: Duration,
    pub killed_by_timeout: bool,
}

impl ExecutionResult {
    /// Text describing why a run failed, for revision prompts and tool errors.
    pub fn error_text(&self) -> String {
        if self.killed_by_timeout {
            return format!("execution timed out after {:.1} s", self.duration.as_secs_f64());
        }
        let err = self.stderr.trim();
        if err.is_empty() {
            format!("exited with status {}", self.exit_status)
        } else {
            err.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("empty snippet")]
    EmptySnippet,
}

pub trait SnippetExecutor: Send + Sync {
    fn execute(&self, snippet: &str, limits: &ExecutionLimits) -> Result<ExecutionResult, SandboxError>;
}

#[derive(Debug, Deserialize)]
struct RunnerReport {
    ok: bool,
    #[serde(default)]
    stdout: String,
    #[serde(default)]
    stderr: String,
    #[allow(dead_code)]
    #[serde(default)]
    duration_ms: u64,
}

fn cap_output(mut s: String, cap: usize) -> String {
    if s.len() <= cap {
        return s;
    }
    let mut cut = cap;
    while !s.is_char_boundary(cut) {
        cut -= 1;
    }
    s.truncate(cut);
    s.push_str(&format!("\n[output truncated at {cap} bytes]"));
    s
}

/// Runs each snippet through an external runner program in its own process
/// group and scratch directory.
pub struct SubprocessSandbox {
    runner: Vec<String>,
    slots: Semaphore,
    poll: Duration,
}

impl SubprocessSandbox {
    /// `runner` is the argv prefix; the snippet path and timeout are appended.
    pub fn new(runner: Vec<String>, max_concurrent: usize) -> Result<Self, SandboxError> {
        if runner.is_empty() {
            return Err(SandboxError::Unavailable("runner command is empty".into()));
        }
        Ok(Self {
            runner,
            slots: Semaphore::new(max_concurrent.max(1)),
            poll: Duration::from_millis(5),
        })
    }

    fn command(&self, scratch: &std::path::Path, snippet_path: &std::path::Path, limits: &ExecutionLimits) -> Command {
        let mut cmd = Command::new(&self.runner[0]);
        cmd.args(&self.runner[1..])
            .arg(snippet_path)
            .arg(format!("{}", limits.wall_timeout.as_secs_f64()))
            .current_dir(scratch)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", scratch)
            .env("TMPDIR", scratch)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let cpu_secs = limits.wall_timeout.as_secs() + 2;
        let file_cap = (limits.output_cap as u64).max(1 << 20) * 16;
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                let cpu = libc::rlimit {
                    rlim_cur: cpu_secs as libc::rlim_t,
                    rlim_max: cpu_secs as libc::rlim_t,
                };
                let fsize = libc::rlimit {
                    rlim_cur: file_cap as libc::rlim_t,
                    rlim_max: file_cap as libc::rlim_t,
                };
                libc::setrlimit(libc::RLIMIT_CPU, &cpu);
                libc::setrlimit(libc::RLIMIT_FSIZE, &fsize);
                Ok(())
            });
        }
        cmd
    }
}

fn drain<R: Read + Send + 'static>(mut r: R) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        buf
    })
}

impl SnippetExecutor for SubprocessSandbox {
    fn execute(&self, snippet: &str, limits: &ExecutionLimits) -> Result<ExecutionResult, SandboxError> {
        if snippet.trim().is_empty() {
            return Err(SandboxError::EmptySnippet);
        }
        let _slot = self.slots.acquire();
        let unavailable = |what: &str, e: &dyn std::fmt::Display| SandboxError::Unavailable(format!("{what}: {e}"));

        let scratch = tempfile::Builder::new()
            .prefix("planexec-run-")
            .tempdir()
            .map_err(|e| unavailable("cannot create scratch dir", &e))?;
        let snippet_path: PathBuf = scratch.path().join("snippet.py");
        std::fs::write(&snippet_path, snippet).map_err(|e| unavailable("cannot write snippet", &e))?;

        let started = Instant::now();
        let mut child = self
            .command(scratch.path(), &snippet_path, limits)
            .spawn()
            .map_err(|e| unavailable(&format!("cannot start runner '{}'", self.runner[0]), &e))?;
        let out = drain(child.stdout.take().expect("piped stdout"));
        let err = drain(child.stderr.take().expect("piped stderr"));

        let deadline = started + limits.wall_timeout;
        let (status, killed) = loop {
            match child.try_wait() {
                Ok(Some(status)) => break (Some(status), false),
                Ok(None) if Instant::now() >= deadline => {
                    // negative pid: signal the whole process group
                    unsafe {
                        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                    }
                    let _ = child.kill();
                    let _ = child.wait();
                    break (None, true);
                }
                Ok(None) => std::thread::sleep(self.poll),
                Err(e) => return Err(unavailable("wait failed", &e)),
            }
        };
        let duration = started.elapsed();
        let raw_out = String::from_utf8_lossy(&out.join().unwrap_or_default()).into_owned();
        let raw_err = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();

        if killed {
            return Ok(ExecutionResult {
                ok: false,
                stdout: String::new(),
                stderr: format!("killed after exceeding the {:.1} s wall timeout", limits.wall_timeout.as_secs_f64()),
                exit_status: KILLED_STATUS,
                duration,
                killed_by_timeout: true,
            });
        }
        let status = status.expect("status when not killed");
        if !status.success() {
            return Err(SandboxError::Unavailable(format!(
                "runner exited with {status}: {}",
                raw_err.trim().chars().take(500).collect::<String>()
            )));
        }
        let report_line = raw_out.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let report: RunnerReport = serde_json::from_str(report_line)
            .map_err(|e| unavailable("runner printed no report", &e))?;
        Ok(ExecutionResult {
            ok: report.ok,
            stdout: cap_output(report.stdout, limits.output_cap),
            stderr: cap_output(report.stderr, limits.output_cap),
            exit_status: if report.ok { 0 } else { 1 },
            duration,
            killed_by_timeout: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_marks_truncation() {
        assert_eq!(cap_output("abc".into(), 3), "abc");
        let s = cap_output("é".repeat(10), 5);
        assert!(s.starts_with("éé\n[output truncated at 5 bytes]"));
    }

    #[test]
    fn missing_runner_is_unavailable() {
        let sb = SubprocessSandbox::new(vec!["/nonexistent/runner".into()], 1).unwrap();
        match sb.execute("print(1)", &ExecutionLimits::default()) {
            Err(SandboxError::Unavailable(msg)) => assert!(msg.contains("cannot start runner")),
            other => panic!("{other:?}"),
        }
        assert!(SubprocessSandbox::new(vec![], 1).is_err());
    }

    #[test]
    fn empty_snippet_rejected() {
        let sb = SubprocessSandbox::new(vec!["true".into()], 1).unwrap();
        assert_eq!(sb.execute("  ", &ExecutionLimits::default()), Err(SandboxError::EmptySnippet));
    }
}
