mod common;

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use common::{Timing, Variant};
use mepopt_core::measurement::{collect_samples, SamplingPlan};
use mepopt_core::protocol::{parse_run_report, read_tensor_file};
use mepopt_core::toolchain::{self, ToolchainError};
use mepopt_core::SourceFile;

fn build(dir: &Path, variant: &Variant) -> Result<PathBuf, ToolchainError> {
    let text = common::mep_source(&common::kernel_region(variant), Timing::Synthetic, 8);
    toolchain::write_sources(
        &dir.join("src"),
        &[SourceFile {
            filename: "mep.c".into(),
            text,
        }],
    )?;
    toolchain::compile(&common::profile(), dir, Some(&dir.join("build.log")))?;
    Ok(toolchain::exe_path(dir))
}

#[test]
fn builds_runs_and_writes_the_output_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let exe = build(dir.path(), &Variant::busy(3)).unwrap();
    let result =
        toolchain::execute(&common::profile(), &exe, 100, Path::new("out.mepo"), None).unwrap();
    let report = parse_run_report(&result.stdout).unwrap();
    assert!(report.status_ok);
    assert_eq!(report.mean_kernel_time_ns(), Some(300));
    assert_eq!(report.data_bytes, Some(800));
    let out = read_tensor_file(&dir.path().join("out.mepo")).unwrap();
    assert_eq!(out.dims(), &[100]);
}

#[test]
fn compile_errors_carry_compiler_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    match build(dir.path(), &Variant::CompileError { tag: "x" }) {
        Err(ToolchainError::CompileFailed { result }) => {
            assert!(
                result.stderr.contains("undeclared_offset"),
                "{}",
                result.stderr
            );
            // Relative paths keep diagnostics independent of the session location.
            assert!(!result.stderr.contains(dir.path().to_str().unwrap()));
        }
        other => panic!("{other:?}"),
    }
    let log = std::fs::read_to_string(dir.path().join("build.log")).unwrap();
    assert!(log.contains("undeclared_offset"));
}

#[test]
fn signals_are_reported_as_crashes() {
    let dir = tempfile::tempdir().unwrap();
    let exe = build(dir.path(), &Variant::Crash).unwrap();
    match toolchain::execute(&common::profile(), &exe, 10, Path::new("out.mepo"), None) {
        Err(ToolchainError::RunCrashed { result }) => {
            assert!(result.is_signal(), "exit {}", result.exit_code);
            assert_eq!(result.failure_label(), "runtime (crash)");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn runs_past_the_timeout_are_killed() {
    let dir = tempfile::tempdir().unwrap();
    let exe = build(dir.path(), &Variant::Sleep { ms: 20_000 }).unwrap();
    let mut profile = common::profile();
    profile.run_timeout_ms = 300;
    let start = Instant::now();
    match toolchain::execute(&profile, &exe, 10, Path::new("out.mepo"), None) {
        Err(ToolchainError::RunTimeout { result }) => {
            assert!(result.timed_out);
            assert_eq!(result.exit_code, profile.kill_sentinel);
        }
        other => panic!("{other:?}"),
    }
    assert!(
        start.elapsed() < Duration::from_secs(5),
        "{:?}",
        start.elapsed()
    );
}

#[test]
fn measured_runs_never_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let exe = build(dir.path(), &Variant::Sleep { ms: 150 }).unwrap();
    let start = Instant::now();
    let handles: Vec<_> = (0..3)
        .map(|i| {
            let exe = exe.clone();
            thread::spawn(move || {
                let out = format!("out{i}.mepo");
                toolchain::execute(&common::profile(), &exe, 10, Path::new(&out), None).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(
        start.elapsed() >= Duration::from_millis(450),
        "three 150 ms runs finished in {:?}",
        start.elapsed()
    );
}

#[test]
fn sampling_plan_yields_exactly_r_samples() {
    let dir = tempfile::tempdir().unwrap();
    let exe = build(dir.path(), &Variant::busy(7)).unwrap();
    let plan = SamplingPlan {
        runs: 6,
        trim_k: 1,
        warmup_runs: 2,
    };
    let run = collect_samples(
        &common::profile(),
        &exe,
        1000,
        Path::new("out.mepo"),
        plan,
        None,
    )
    .unwrap();
    assert_eq!(run.set.samples_ns, vec![7000; 6]);
    assert_eq!(run.set.trimmed_mean_ns, 7000);
    assert_eq!(run.set.warmup_runs, 2);
    assert!(run.max_wall_ns > 0);
    assert_eq!(run.last_report.data_bytes, Some(8000));
}

#[test]
fn missing_compiler_is_an_environment_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut profile = common::profile();
    profile.compile_argv[0] = "definitely-not-a-compiler-xyz".into();
    toolchain::write_sources(
        &dir.path().join("src"),
        &[SourceFile {
            filename: "mep.c".into(),
            text: "int main(void){return 0;}\n".into(),
        }],
    )
    .unwrap();
    let err = toolchain::compile(&profile, dir.path(), None).unwrap_err();
    assert!(
        matches!(err, ToolchainError::ToolchainMissing { .. }),
        "{err:?}"
    );
    assert!(!err.is_code_fault());
}
