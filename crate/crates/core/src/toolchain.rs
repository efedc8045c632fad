//! Compile-and-run adapter driven by argv templates.
//!
//! Templates are substituted token by token and spawned directly, never via a
//! shell. Placeholders: `{src_dir}` and `{out_exe}` for compilation; `{exe}`,
//! `{problem_size}` and `{out_file}` for execution.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::{mpsc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Dialect, MepConstraints, Nanos, SourceFile};

/// Serializes measured executions process-wide.
static DEVICE_LOCK: Mutex<()> = Mutex::new(());

/// Holds the exclusive device lock. Runs started through [`execute`] take it
/// themselves; callers only need this to group several runs.
pub fn device_lock() -> MutexGuard<'static, ()> {
    DEVICE_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub const DEFAULT_KILL_SENTINEL: i32 = 137;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolchainProfile {
    pub name: String,
    pub dialect: Dialect,
    pub compile_argv: Vec<String>,
    pub run_argv: Vec<String>,
    pub run_timeout_ms: u64,
    #[serde(default = "default_compile_timeout_ms")]
    pub compile_timeout_ms: u64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Exit code recorded for runs killed at the timeout.
    #[serde(default = "default_kill_sentinel")]
    pub kill_sentinel: i32,
}

fn default_compile_timeout_ms() -> u64 {
    300_000
}

fn default_kill_sentinel() -> i32 {
    DEFAULT_KILL_SENTINEL
}

impl ToolchainProfile {
    /// Stock profile per dialect: `cc`, `nvcc` or `hipcc` on the main source.
    pub fn default_for(dialect: Dialect) -> Self {
        let main = format!("{{src_dir}}/{}", dialect.main_source_name());
        let compile_argv: Vec<String> = match dialect {
            Dialect::CToy => vec!["cc", "-O2", "-std=c11", "-o", "{out_exe}", &main, "-lm"],
            Dialect::Cuda => vec!["nvcc", "-O3", "-o", "{out_exe}", &main],
            Dialect::Hip => vec!["hipcc", "-O3", "-o", "{out_exe}", &main],
        }
        .into_iter()
        .map(String::from)
        .collect();
        ToolchainProfile {
            name: format!("{dialect}-default"),
            dialect,
            compile_argv,
            run_argv: vec!["{exe}".into(), "{problem_size}".into(), "{out_file}".into()],
            run_timeout_ms: 120_000,
            compile_timeout_ms: default_compile_timeout_ms(),
            env: BTreeMap::new(),
            kill_sentinel: DEFAULT_KILL_SENTINEL,
        }
    }

    pub fn run_timeout(&self) -> Duration {
        Duration::from_millis(self.run_timeout_ms)
    }

    pub fn validate(&self, constraints: Option<&MepConstraints>) -> Result<(), ToolchainError> {
        let has = |argv: &[String], p: &str| argv.iter().any(|t| t.contains(p));
        if self.compile_argv.is_empty() || self.run_argv.is_empty() {
            return Err(ToolchainError::InvalidProfile("empty argv template".into()));
        }
        for p in ["{src_dir}", "{out_exe}"] {
            if !has(&self.compile_argv, p) {
                return Err(ToolchainError::InvalidProfile(format!(
                    "compile template lacks {p}"
                )));
            }
        }
        if !has(&self.run_argv, "{exe}") {
            return Err(ToolchainError::InvalidProfile(
                "run template lacks {exe}".into(),
            ));
        }
        substitute(&self.compile_argv, &compile_bindings("s", "e"))?;
        substitute(&self.run_argv, &run_bindings("e", 1, "o"))?;
        if let Some(c) = constraints {
            let needed = c.t_max_ns.saturating_mul(2);
            if u128::from(self.run_timeout_ms) * 1_000_000 < u128::from(needed) {
                return Err(ToolchainError::InvalidProfile(format!(
                    "run_timeout {} ms must be at least 2 x t_max ({} ms)",
                    self.run_timeout_ms,
                    needed / 1_000_000
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub wall_time_ns: Nanos,
    pub timed_out: bool,
}

impl ExecutionResult {
    /// Exit codes >= 128 mean the process died from a signal.
    pub fn is_signal(&self) -> bool {
        self.exit_code >= 128
    }

    /// Failure stage label for repair prompts.
    pub fn failure_label(&self) -> &'static str {
        if self.timed_out {
            "runtime (timeout)"
        } else if self.is_signal() {
            "runtime (crash)"
        } else {
            "runtime (nonzero exit)"
        }
    }
}

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("invalid toolchain profile: {0}")]
    InvalidProfile(String),
    #[error("toolchain program not found: {program}")]
    ToolchainMissing { program: String },
    #[error("compilation failed (exit {}):\n{}", .result.exit_code, .result.stderr)]
    CompileFailed { result: ExecutionResult },
    #[error("run timed out after {} ms", .result.wall_time_ns / 1_000_000)]
    RunTimeout { result: ExecutionResult },
    #[error("run failed with exit code {}", .result.exit_code)]
    RunCrashed { result: ExecutionResult },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ToolchainError {
    pub fn result(&self) -> Option<&ExecutionResult> {
        match self {
            ToolchainError::CompileFailed { result }
            | ToolchainError::RunTimeout { result }
            | ToolchainError::RunCrashed { result } => Some(result),
            _ => None,
        }
    }

    /// Faults in the code under test, as opposed to the environment.
    pub fn is_code_fault(&self) -> bool {
        matches!(
            self,
            ToolchainError::CompileFailed { .. }
                | ToolchainError::RunTimeout { .. }
                | ToolchainError::RunCrashed { .. }
        )
    }
}

fn compile_bindings<'a>(src_dir: &'a str, out_exe: &'a str) -> Vec<(&'static str, &'a str)> {
    vec![("src_dir", src_dir), ("out_exe", out_exe)]
}

fn run_bindings(exe: &str, problem_size: u64, out_file: &str) -> Vec<(&'static str, String)> {
    vec![
        ("exe", exe.to_string()),
        ("problem_size", problem_size.to_string()),
        ("out_file", out_file.to_string()),
    ]
}

/// Replaces `{name}` occurrences inside each token. Unknown placeholders are errors.
pub fn substitute<S: AsRef<str>>(
    template: &[String],
    bindings: &[(&str, S)],
) -> Result<Vec<String>, ToolchainError> {
    template
        .iter()
        .map(|token| {
            let mut out = String::with_capacity(token.len());
            let mut rest = token.as_str();
            while let Some(start) = rest.find('{') {
                out.push_str(&rest[..start]);
                let after = &rest[start + 1..];
                let Some(end) = after.find('}') else {
                    out.push_str(&rest[start..]);
                    rest = "";
                    break;
                };
                let key = &after[..end];
                let is_name =
                    !key.is_empty() && key.bytes().all(|b| b.is_ascii_lowercase() || b == b'_');
                if !is_name {
                    out.push('{');
                    rest = after;
                    continue;
                }
                let value = bindings
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| v.as_ref())
                    .ok_or_else(|| {
                        ToolchainError::InvalidProfile(format!(
                            "unknown placeholder {{{key}}} in token {token:?}"
                        ))
                    })?;
                out.push_str(value);
                rest = &after[end + 1..];
            }
            out.push_str(rest);
            Ok(out)
        })
        .collect()
}

/// Writes sources below `dir`, creating parent directories.
pub fn write_sources(dir: &Path, sources: &[SourceFile]) -> Result<(), ToolchainError> {
    for src in sources {
        let rel = Path::new(&src.filename);
        if rel.is_absolute()
            || rel
                .components()
                .any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return Err(ToolchainError::InvalidProfile(format!(
                "source filename {:?} escapes the source directory",
                src.filename
            )));
        }
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| ToolchainError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, &src.text).map_err(|source| ToolchainError::Io { path, source })?;
    }
    Ok(())
}

/// Compiles the sources in `workdir/src` into `workdir/mep`.
///
/// The compiler runs with `workdir` as its working directory and relative
/// paths, so diagnostics do not depend on where the session lives. Streams
/// are appended to `log` when given.
pub fn compile(
    profile: &ToolchainProfile,
    workdir: &Path,
    log: Option<&Path>,
) -> Result<ExecutionResult, ToolchainError> {
    let argv = substitute(&profile.compile_argv, &compile_bindings("src", "mep"))?;
    let result = run_process(
        &argv,
        &profile.env,
        workdir,
        Duration::from_millis(profile.compile_timeout_ms),
        profile.kill_sentinel,
    )?;
    if let Some(log) = log {
        append_log(log, "compile", &argv, &result)?;
    }
    if result.exit_code != 0 || result.timed_out {
        return Err(ToolchainError::CompileFailed { result });
    }
    let exe = workdir.join("mep");
    if !exe.exists() {
        let mut result = result;
        result
            .stderr
            .push_str("\ncompiler exited 0 but produced no executable at {out_exe}");
        return Err(ToolchainError::CompileFailed { result });
    }
    Ok(result)
}

/// Path of the executable produced by [`compile`] in `workdir`.
pub fn exe_path(workdir: &Path) -> PathBuf {
    workdir.join("mep")
}

/// Directory a built MEP runs in; relative output paths resolve against it.
pub fn exe_dir(exe: &Path) -> &Path {
    exe.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

/// Runs a built MEP under the device lock, killing it at `run_timeout`.
///
/// The process starts in the executable's directory; `out_file` is passed as
/// given (relative paths resolve against that directory).
pub fn execute(
    profile: &ToolchainProfile,
    exe: &Path,
    problem_size: u64,
    out_file: &Path,
    log: Option<&Path>,
) -> Result<ExecutionResult, ToolchainError> {
    let _device = device_lock();
    execute_locked(profile, exe, problem_size, out_file, log)
}

/// [`execute`] for callers already holding [`device_lock`].
pub fn execute_locked(
    profile: &ToolchainProfile,
    exe: &Path,
    problem_size: u64,
    out_file: &Path,
    log: Option<&Path>,
) -> Result<ExecutionResult, ToolchainError> {
    let cwd = exe_dir(exe);
    let exe_arg = match exe.file_name() {
        Some(name) => format!("./{}", name.to_string_lossy()),
        None => exe.to_string_lossy().into_owned(),
    };
    let argv = substitute(
        &profile.run_argv,
        &run_bindings(&exe_arg, problem_size, &out_file.to_string_lossy()),
    )?;
    let result = run_process(
        &argv,
        &profile.env,
        cwd,
        profile.run_timeout(),
        profile.kill_sentinel,
    )?;
    if let Some(log) = log {
        append_log(log, "run", &argv, &result)?;
    }
    if result.timed_out {
        return Err(ToolchainError::RunTimeout { result });
    }
    if result.exit_code != 0 {
        return Err(ToolchainError::RunCrashed { result });
    }
    Ok(result)
}

/// Runs an arbitrary argv template against a built MEP (profiler hook).
pub fn run_hook(
    template: &[String],
    profile: &ToolchainProfile,
    exe: &Path,
    problem_size: u64,
    out_file: &Path,
) -> Result<ExecutionResult, ToolchainError> {
    let cwd = exe_dir(exe);
    let argv = substitute(
        template,
        &run_bindings(
            &exe.to_string_lossy(),
            problem_size,
            &out_file.to_string_lossy(),
        ),
    )?;
    let _device = device_lock();
    run_process(
        &argv,
        &profile.env,
        cwd,
        profile.run_timeout(),
        profile.kill_sentinel,
    )
}

fn append_log(
    log: &Path,
    phase: &str,
    argv: &[String],
    result: &ExecutionResult,
) -> Result<(), ToolchainError> {
    let io_err = |source| ToolchainError::Io {
        path: log.to_path_buf(),
        source,
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .map_err(io_err)?;
    write!(
        f,
        "=== {phase}: {}\n--- exit {} (timed_out={}, {} ms)\n--- stdout\n{}\n--- stderr\n{}\n",
        argv.join(" "),
        result.exit_code,
        result.timed_out,
        result.wall_time_ns / 1_000_000,
        result.stdout,
        result.stderr
    )
    .map_err(io_err)
}

fn spawn_reader<R: Read + Send + 'static>(mut pipe: R) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

#[cfg(unix)]
fn exit_code_of(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_code_of(status: ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

/// Spawns `argv` without a shell, capturing both streams.
pub(crate) fn run_process(
    argv: &[String],
    env: &BTreeMap<String, String>,
    cwd: &Path,
    timeout: Duration,
    kill_sentinel: i32,
) -> Result<ExecutionResult, ToolchainError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| ToolchainError::InvalidProfile("empty argv".into()))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .envs(env)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(target_os = "linux")]
    {
        use std::os::unix::process::CommandExt;
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(|| {
                libc::setpgid(0, 0);
                libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
                Ok(())
            });
        }
    }
    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ToolchainError::ToolchainMissing {
                program: program.clone(),
            })
        }
        Err(e) if e.kind() == io::ErrorKind::PermissionDenied => {
            return Err(ToolchainError::ToolchainMissing {
                program: format!("{program} (permission denied)"),
            })
        }
        Err(source) => {
            return Err(ToolchainError::Io {
                path: PathBuf::from(program),
                source,
            })
        }
    };
    let pid = child.id();
    let stdout = spawn_reader(child.stdout.take().expect("piped stdout"));
    let stderr = spawn_reader(child.stderr.take().expect("piped stderr"));

    let (tx, rx) = mpsc::channel();
    let waiter = thread::spawn(move || {
        let status = child.wait();
        let _ = tx.send(status);
    });
    let (status, timed_out) = match rx.recv_timeout(timeout) {
        Ok(status) => (status, false),
        Err(_) => {
            kill_tree(pid);
            (
                rx.recv()
                    .unwrap_or_else(|_| Err(io::Error::other("waiter vanished"))),
                true,
            )
        }
    };
    let wall_time_ns = start.elapsed().as_nanos().min(u128::from(u64::MAX)) as u64;
    let _ = waiter.join();
    let status = status.map_err(|source| ToolchainError::Io {
        path: PathBuf::from(program),
        source,
    })?;
    // Grandchildren holding the pipes open would block the readers forever.
    if timed_out {
        kill_tree(pid);
    }
    let stdout = String::from_utf8_lossy(&stdout.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&stderr.join().unwrap_or_default()).into_owned();
    Ok(ExecutionResult {
        exit_code: if timed_out {
            kill_sentinel
        } else {
            exit_code_of(status)
        },
        stdout,
        stderr,
        wall_time_ns,
        timed_out,
    })
}

#[cfg(unix)]
fn kill_tree(pid: u32) {
    // SAFETY: plain kill(2); the group was created by setpgid in pre_exec.
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
        libc::kill(pid as i32, libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_tree(_pid: u32) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_is_token_wise() {
        let t = vec![
            "cc".to_string(),
            "{src_dir}/mep.c".into(),
            "-o".into(),
            "{out_exe}".into(),
        ];
        let out = substitute(&t, &[("src_dir", "a b; rm -rf /"), ("out_exe", "x")]).unwrap();
        assert_eq!(out, vec!["cc", "a b; rm -rf //mep.c", "-o", "x"]);
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let t = vec!["{nope}".to_string()];
        assert!(substitute::<&str>(&t, &[]).is_err());
        let literal = vec!["-DX={1}".to_string(), "{".into()];
        assert_eq!(substitute::<&str>(&literal, &[]).unwrap(), literal);
    }

    #[test]
    fn profile_requires_placeholders_and_timeout_slack() {
        let mut p = ToolchainProfile::default_for(Dialect::CToy);
        p.validate(None).unwrap();
        let c = MepConstraints {
            t_min_ns: 1,
            t_max_ns: 60_000_000_000,
            s_max_bytes: 1,
        };
        assert!(p.validate(Some(&c)).is_ok());
        p.run_timeout_ms = 119_999;
        assert!(p.validate(Some(&c)).is_err());
        let mut q = ToolchainProfile::default_for(Dialect::CToy);
        q.compile_argv.retain(|t| !t.contains("{out_exe}"));
        assert!(q.validate(None).is_err());
        let mut r = ToolchainProfile::default_for(Dialect::CToy);
        r.run_argv = vec!["true".into()];
        assert!(r.validate(None).is_err());
    }

    #[test]
    fn signal_exit_codes_classify_as_crash() {
        let r = ExecutionResult {
            exit_code: 136,
            stdout: String::new(),
            stderr: String::new(),
            wall_time_ns: 0,
            timed_out: false,
        };
        assert!(r.is_signal());
        assert_eq!(r.failure_label(), "runtime (crash)");
    }

    #[test]
    fn sources_cannot_escape() {
        let dir = tempfile::tempdir().unwrap();
        let bad = [SourceFile {
            filename: "../x.c".into(),
            text: String::new(),
        }];
        assert!(write_sources(dir.path(), &bad).is_err());
    }
}
