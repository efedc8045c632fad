//! MEP construction: model-generated harness, repair on failure, and the
//! problem-size search that makes the program satisfy the time and data
//! limits.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use crate::domain::{
    DomainError, KernelSource, MepConstraints, MepProgram, Nanos, OptimizerConfig, SourceFile,
};
use crate::llm::prompt::{PromptContext, PromptSet};
use crate::llm::{invoke, Backend, LlmError, LlmRequest, Stage};
use crate::measurement::{
    check_data_constraint, check_time_constraints, collect_samples, ConstraintViolation, DataCheck,
    MeasurementError, SamplingPlan,
};
use crate::protocol::{mep_contract_text, read_tensor_file};
use crate::session::write_atomic;
use crate::toolchain::{self, ToolchainError, ToolchainProfile};

/// Upper bound on size probes during the doubling phase (seed included).
pub const MAX_DOUBLING_PROBES: u32 = 40;

/// Output tensor name passed to every run.
pub const OUTPUT_FILE_NAME: &str = "out.mepo";

/// Kernel times below this are too noisy for the monotonicity check.
const MONOTONIC_FLOOR_NS: Nanos = 10_000;

#[derive(Debug, Error)]
pub enum MepBuildError {
    #[error(
        "MEP construction failed after {repairs} repairs; last failure at {stage}:\n{diagnostics}"
    )]
    MepConstructionFailed {
        repairs: u32,
        stage: String,
        diagnostics: String,
    },
    #[error(
        "no problem size satisfies the constraints ({reason}); at size {problem_size}: \
         T_ker {t_ker_ns} ns, T_overall {t_overall_ns} ns, S_data {s_data_bytes} B"
    )]
    ConstraintsInfeasible {
        reason: String,
        problem_size: u64,
        t_ker_ns: Nanos,
        t_overall_ns: Nanos,
        s_data_bytes: u64,
    },
    #[error(
        "kernel time fell from {from_ns} ns at size {from_size} to {to_ns} ns at size {to_size}; \
         runtime is not monotonic in the problem size"
    )]
    NonMonotonic {
        from_size: u64,
        to_size: u64,
        from_ns: Nanos,
        to_ns: Nanos,
    },
    #[error("size probe at {problem_size} failed: {source}")]
    Probe {
        problem_size: u64,
        #[source]
        source: MeasurementError,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Quantities measured at one problem size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    pub t_ker_ns: Nanos,
    pub t_overall_ns: Nanos,
    pub s_data_bytes: u64,
}

/// Measures the MEP at a given size.
pub trait SizeProbe {
    fn probe(&mut self, problem_size: u64) -> Result<ProbeResult, MepBuildError>;
}

/// Probes a built executable with a short trimmed sampling campaign.
pub struct ExecutableProbe<'a> {
    pub profile: &'a ToolchainProfile,
    pub exe: PathBuf,
    pub plan: SamplingPlan,
    pub log: Option<PathBuf>,
    pub probes: u32,
}

impl<'a> ExecutableProbe<'a> {
    pub fn new(profile: &'a ToolchainProfile, exe: PathBuf, config: &OptimizerConfig) -> Self {
        ExecutableProbe {
            profile,
            exe,
            plan: SamplingPlan {
                runs: config.probe_runs,
                trim_k: config.probe_trim,
                warmup_runs: 1,
            },
            log: None,
            probes: 0,
        }
    }
}

impl SizeProbe for ExecutableProbe<'_> {
    fn probe(&mut self, problem_size: u64) -> Result<ProbeResult, MepBuildError> {
        self.probes += 1;
        match collect_samples(
            self.profile,
            &self.exe,
            problem_size,
            Path::new(OUTPUT_FILE_NAME),
            self.plan,
            self.log.as_deref(),
        ) {
            Ok(run) => Ok(ProbeResult {
                t_ker_ns: run.set.trimmed_mean_ns,
                t_overall_ns: run.max_wall_ns,
                s_data_bytes: run.last_report.data_bytes.unwrap_or(0),
            }),
            // A run killed at the timeout certainly exceeds the budget; the
            // kernel time is unknown but at least as long as any smaller size.
            Err(MeasurementError::Run {
                source: ToolchainError::RunTimeout { result },
                ..
            }) => Ok(ProbeResult {
                t_ker_ns: Nanos::MAX,
                t_overall_ns: result.wall_time_ns,
                s_data_bytes: 0,
            }),
            Err(source) => Err(MepBuildError::Probe {
                problem_size,
                source,
            }),
        }
    }
}

fn meets_caps(r: &ProbeResult, c: &MepConstraints) -> bool {
    r.t_overall_ns <= c.t_max_ns && r.s_data_bytes <= c.s_max_bytes
}

fn infeasible(reason: &str, size: u64, r: &ProbeResult) -> MepBuildError {
    MepBuildError::ConstraintsInfeasible {
        reason: reason.to_string(),
        problem_size: size,
        t_ker_ns: r.t_ker_ns,
        t_overall_ns: r.t_overall_ns,
        s_data_bytes: r.s_data_bytes,
    }
}

/// Finds a problem size whose kernel time reaches `t_min` while the whole
/// run stays within `t_max` and the input within `s_max`.
///
/// Doubles from `seed` until `t_min` is met (at most
/// [`MAX_DOUBLING_PROBES`] probes). If that size breaks a cap, bisects
/// between the last size below `t_min` and it.
pub fn search_problem_size(
    probe: &mut dyn SizeProbe,
    seed: u64,
    constraints: &MepConstraints,
) -> Result<u64, MepBuildError> {
    let mut size = seed.max(1);
    let mut result = probe.probe(size)?;
    let mut probes = 1;
    let mut below: Option<u64> = None;
    while result.t_ker_ns < constraints.t_min_ns {
        if !meets_caps(&result, constraints) {
            return Err(infeasible(
                "a cap is exceeded before T_ker reaches t_min",
                size,
                &result,
            ));
        }
        if probes >= MAX_DOUBLING_PROBES {
            return Err(infeasible(
                "t_min not reached within the doubling budget",
                size,
                &result,
            ));
        }
        let Some(next) = size.checked_mul(2) else {
            return Err(infeasible(
                "problem size overflow before reaching t_min",
                size,
                &result,
            ));
        };
        let next_result = probe.probe(next)?;
        probes += 1;
        if result.t_ker_ns >= MONOTONIC_FLOOR_NS
            && u128::from(next_result.t_ker_ns) * 5 < u128::from(result.t_ker_ns) * 4
        {
            warn!("kernel time dropped by more than 20% when doubling {size} -> {next}");
            return Err(MepBuildError::NonMonotonic {
                from_size: size,
                to_size: next,
                from_ns: result.t_ker_ns,
                to_ns: next_result.t_ker_ns,
            });
        }
        below = Some(size);
        size = next;
        result = next_result;
    }
    if meets_caps(&result, constraints) {
        return Ok(size);
    }
    let Some(mut lo) = below else {
        return Err(infeasible(
            "the seed size already exceeds a cap; no smaller size was probed",
            size,
            &result,
        ));
    };
    let mut hi = size;
    let mut hi_result = result;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let r = probe.probe(mid)?;
        if r.t_ker_ns >= constraints.t_min_ns {
            if meets_caps(&r, constraints) {
                return Ok(mid);
            }
            hi = mid;
            hi_result = r;
        } else {
            lo = mid;
        }
    }
    Err(infeasible(
        "every size reaching t_min exceeds t_max or s_max",
        hi,
        &hi_result,
    ))
}

/// Why one construction attempt failed.
#[derive(Debug, Clone)]
pub struct StageFailure {
    pub stage: &'static str,
    pub diagnostics: String,
}

fn stage_failure(stage: &'static str, diagnostics: impl Into<String>) -> StageFailure {
    StageFailure {
        stage,
        diagnostics: diagnostics.into(),
    }
}

fn describe_run_error(e: &ToolchainError) -> String {
    match e.result() {
        Some(r) => format!(
            "{} (exit code {})\n--- stdout\n{}\n--- stderr\n{}",
            r.failure_label(),
            r.exit_code,
            tail(&r.stdout, 4_000),
            tail(&r.stderr, 4_000)
        ),
        None => e.to_string(),
    }
}

/// Last `max` bytes of `s`, on a char boundary.
pub fn tail(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

/// Compiles `sources` in `dir` and checks one run at the seed size: status
/// OK, kernel times present and a readable output tensor.
fn try_sources(
    sources: &[SourceFile],
    kernel: &KernelSource,
    profile: &ToolchainProfile,
    seed: u64,
    dir: &Path,
) -> Result<Result<PathBuf, StageFailure>, MepBuildError> {
    let probe_mep = MepProgram {
        sources: sources.to_vec(),
        problem_size: seed,
        reported_data_bytes: 0,
        build_artifacts_dir: PathBuf::new(),
        repair_count: 0,
    };
    if let Err(e) = probe_mep.validate(&kernel.entry_symbol, None) {
        return Ok(Err(stage_failure("protocol", e.to_string())));
    }
    toolchain::write_sources(&dir.join("src"), sources)?;
    let build_log = dir.join("build.log");
    match toolchain::compile(profile, dir, Some(&build_log)) {
        Ok(_) => {}
        Err(ToolchainError::CompileFailed { result }) => {
            return Ok(Err(stage_failure("compile", result.stderr)));
        }
        Err(e) => return Err(e.into()),
    }
    let exe = toolchain::exe_path(dir);
    let run_log = dir.join("run.log");
    let result = match toolchain::execute(
        profile,
        &exe,
        seed,
        Path::new(OUTPUT_FILE_NAME),
        Some(&run_log),
    ) {
        Ok(r) => r,
        Err(e) if e.is_code_fault() => {
            return Ok(Err(stage_failure("runtime", describe_run_error(&e))))
        }
        Err(e) => return Err(e.into()),
    };
    let report = match crate::protocol::parse_run_report(&result.stdout) {
        Ok(r) => r,
        Err(e) => {
            return Ok(Err(stage_failure(
                "protocol",
                format!("{e}\n--- stdout\n{}", tail(&result.stdout, 4_000)),
            )))
        }
    };
    if !report.status_ok {
        return Ok(Err(stage_failure(
            "protocol",
            format!(
                "missing `MEP_STATUS OK` line\n--- stdout\n{}\n--- stderr\n{}",
                tail(&result.stdout, 4_000),
                tail(&result.stderr, 4_000)
            ),
        )));
    }
    let out = report
        .output_file
        .as_ref()
        .map(|p| dir.join(p))
        .unwrap_or_else(|| dir.join(OUTPUT_FILE_NAME));
    if let Err(e) = read_tensor_file(&out) {
        return Ok(Err(stage_failure(
            "protocol",
            format!("output tensor unreadable: {e}"),
        )));
    }
    Ok(Ok(exe))
}

fn constraints_text(c: &MepConstraints) -> String {
    format!(
        "- average kernel time T_ker >= {} ns (t_min)\n\
         - whole-program wall time T_overall <= {} ns (t_max)\n\
         - generated input data S_data <= {} bytes (s_max)",
        c.t_min_ns, c.t_max_ns, c.s_max_bytes
    )
}

fn sources_as_text(sources: &[SourceFile]) -> String {
    sources
        .iter()
        .map(|s| format!("// file: {}\n{}", s.filename, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn merge_files(sources: &mut Vec<SourceFile>, files: Vec<(String, String)>) {
    for (filename, text) in files {
        match sources.iter_mut().find(|s| s.filename == filename) {
            Some(s) => s.text = text,
            None => sources.push(SourceFile { filename, text }),
        }
    }
}

/// Everything `build_mep` needs besides the kernel.
pub struct BuildContext<'a> {
    pub constraints: &'a MepConstraints,
    pub config: &'a OptimizerConfig,
    pub backend: &'a dyn Backend,
    pub profile: &'a ToolchainProfile,
    pub prompts: &'a PromptSet,
    /// Session directory; attempts go to `<session>/mep/attempt_<i>`.
    pub session_dir: &'a Path,
}

/// Asks the model for an MEP around `kernel`, repairing compile, runtime and
/// protocol failures up to `repair_attempts_max` times, then searches the
/// problem size and verifies the result on a fresh run.
pub fn build_mep(
    kernel: &KernelSource,
    ctx: &BuildContext<'_>,
) -> Result<MepProgram, MepBuildError> {
    let mut prompt_ctx = PromptContext::new();
    prompt_ctx.insert("dialect", kernel.dialect.to_string());
    prompt_ctx.insert("entry_symbol", kernel.entry_symbol.clone());
    prompt_ctx.insert("constraints", constraints_text(ctx.constraints));
    prompt_ctx.insert("mep_contract", mep_contract_text().to_string());
    prompt_ctx.insert("kernel_name", kernel.name.clone());
    prompt_ctx.insert("kernel_source", kernel.source_text.clone());
    let prompt = ctx.prompts.render(Stage::BuildMep, &prompt_ctx)?;
    let mep_dir = ctx.session_dir.join("mep");
    write_file(&mep_dir.join("prompt.md"), prompt.as_bytes())?;
    let request = LlmRequest {
        stage: Stage::BuildMep,
        prompt,
        round_index: 0,
        candidate_index: None,
        attempt: 0,
        temperature_hint: 0.0,
    };
    let response = invoke(ctx.backend, &request)?;
    write_file(&mep_dir.join("response.md"), response.raw.as_bytes())?;
    let mut sources = Vec::new();
    merge_files(
        &mut sources,
        response.files(kernel.dialect.main_source_name()),
    );
    construct(kernel, sources, ctx, None, true)
}

/// Validates user-supplied MEP sources (no model involved). With a fixed
/// `problem_size` the size search is skipped.
pub fn adopt_existing_mep(
    kernel: &KernelSource,
    dir: &Path,
    problem_size: Option<u64>,
    ctx: &BuildContext<'_>,
) -> Result<MepProgram, MepBuildError> {
    let mut sources = Vec::new();
    let io = |source| MepBuildError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        if entry.file_type().map_err(io)?.is_file() {
            let text = fs::read_to_string(entry.path()).map_err(|source| MepBuildError::Io {
                path: entry.path(),
                source,
            })?;
            sources.push(SourceFile {
                filename: entry.file_name().to_string_lossy().into_owned(),
                text,
            });
        }
    }
    construct(kernel, sources, ctx, problem_size, false)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), MepBuildError> {
    write_atomic(path, bytes).map_err(|source| MepBuildError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn construct(
    kernel: &KernelSource,
    mut sources: Vec<SourceFile>,
    ctx: &BuildContext<'_>,
    fixed_size: Option<u64>,
    repair: bool,
) -> Result<MepProgram, MepBuildError> {
    let seed = fixed_size.unwrap_or(ctx.config.seed_problem_size);
    let mep_dir = ctx.session_dir.join("mep");
    let max_repairs = if repair {
        ctx.config.repair_attempts_max
    } else {
        0
    };
    let mut repairs = 0;
    let (attempt_rel, exe) = loop {
        let rel = PathBuf::from("mep").join(format!("attempt_{repairs}"));
        let dir = ctx.session_dir.join(&rel);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|source| MepBuildError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        let failure = match try_sources(&sources, kernel, ctx.profile, seed, &dir)? {
            Ok(exe) => break (rel, exe),
            Err(f) => f,
        };
        info!("MEP attempt {repairs} failed at {}", failure.stage);
        if repairs >= max_repairs {
            return Err(MepBuildError::MepConstructionFailed {
                repairs,
                stage: failure.stage.to_string(),
                diagnostics: failure.diagnostics,
            });
        }
        repairs += 1;
        let mut rctx = PromptContext::new();
        rctx.insert("dialect", kernel.dialect.to_string());
        rctx.insert("failure_stage", failure.stage.to_string());
        rctx.insert("failing_source", sources_as_text(&sources));
        rctx.insert("diagnostics", failure.diagnostics.clone());
        rctx.insert(
            "repair_scope",
            format!(
                "Return the complete corrected program. It must still follow this contract:\n\n{}",
                mep_contract_text()
            ),
        );
        let prompt = ctx.prompts.render(Stage::Repair, &rctx)?;
        let request = LlmRequest {
            stage: Stage::Repair,
            prompt: prompt.clone(),
            round_index: 0,
            candidate_index: Some(0),
            attempt: repairs,
            temperature_hint: 0.0,
        };
        let response = match invoke(ctx.backend, &request) {
            Ok(r) => r,
            Err(LlmError::EmptyResponse { raw, .. }) => {
                write_file(
                    &mep_dir.join(format!("repair_{repairs}.md")),
                    format!("## Prompt\n\n{prompt}\n\n## Response\n\n{raw}\n").as_bytes(),
                )?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        write_file(
            &mep_dir.join(format!("repair_{repairs}.md")),
            format!("## Prompt\n\n{prompt}\n\n## Response\n\n{}\n", response.raw).as_bytes(),
        )?;
        merge_files(
            &mut sources,
            response.files(kernel.dialect.main_source_name()),
        );
    };

    let mut probe = ExecutableProbe::new(ctx.profile, exe.clone(), ctx.config);
    probe.log = Some(ctx.session_dir.join(&attempt_rel).join("probe.log"));
    let problem_size = match fixed_size {
        Some(size) => size,
        None => search_problem_size(&mut probe, seed, ctx.constraints)?,
    };
    info!("problem size {problem_size} after {} probes", probe.probes);

    let verification = collect_samples(
        ctx.profile,
        &exe,
        problem_size,
        Path::new(OUTPUT_FILE_NAME),
        probe.plan,
        probe.log.as_deref(),
    )
    .map_err(|source| MepBuildError::Probe {
        problem_size,
        source,
    })?;
    let measured = ProbeResult {
        t_ker_ns: verification.set.trimmed_mean_ns,
        t_overall_ns: verification.max_wall_ns,
        s_data_bytes: verification.last_report.data_bytes.unwrap_or(0),
    };
    let mut violations: Vec<ConstraintViolation> =
        check_time_constraints(measured.t_ker_ns, measured.t_overall_ns, ctx.constraints)
            .err()
            .unwrap_or_default();
    match check_data_constraint(measured.s_data_bytes, ctx.constraints) {
        Ok(DataCheck::PassZeroBytes) => {
            warn!("the MEP reports 0 bytes of input data; its generator may be broken")
        }
        Ok(DataCheck::Pass) => {}
        Err(v) => violations.push(v),
    }
    if !violations.is_empty() {
        let reason = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(infeasible(
            &format!("verification run failed: {reason}"),
            problem_size,
            &measured,
        ));
    }
    match verification.output_file.as_deref() {
        Some(p) => {
            read_tensor_file(p).map_err(|e| MepBuildError::MepConstructionFailed {
                repairs,
                stage: "protocol".into(),
                diagnostics: format!("verification output unreadable: {e}"),
            })?;
        }
        None => {
            read_tensor_file(&toolchain::exe_dir(&exe).join(OUTPUT_FILE_NAME)).map_err(|e| {
                MepBuildError::MepConstructionFailed {
                    repairs,
                    stage: "protocol".into(),
                    diagnostics: format!("verification output unreadable: {e}"),
                }
            })?;
        }
    }
    let mep = MepProgram {
        sources,
        problem_size,
        reported_data_bytes: measured.s_data_bytes,
        build_artifacts_dir: attempt_rel,
        repair_count: repairs,
    };
    mep.validate(&kernel.entry_symbol, Some(ctx.constraints))?;
    Ok(mep)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthetic probe: `t_ker = per_elem * n`, `s_data = bytes_per_elem * n`.
    struct Linear {
        per_elem: u64,
        bytes_per_elem: u64,
        overhead: u64,
        calls: u32,
    }

    impl SizeProbe for Linear {
        fn probe(&mut self, n: u64) -> Result<ProbeResult, MepBuildError> {
            self.calls += 1;
            let t = self.per_elem.saturating_mul(n);
            Ok(ProbeResult {
                t_ker_ns: t,
                t_overall_ns: t.saturating_mul(3).saturating_add(self.overhead),
                s_data_bytes: self.bytes_per_elem.saturating_mul(n),
            })
        }
    }

    fn c(t_min: u64, t_max: u64, s_max: u64) -> MepConstraints {
        MepConstraints {
            t_min_ns: t_min,
            t_max_ns: t_max,
            s_max_bytes: s_max,
        }
    }

    #[test]
    fn doubling_lands_on_first_size_meeting_t_min() {
        let mut p = Linear {
            per_elem: 10,
            bytes_per_elem: 8,
            overhead: 0,
            calls: 0,
        };
        let n =
            search_problem_size(&mut p, 1024, &c(50_000_000, 60_000_000_000, u64::MAX)).unwrap();
        // 10 ns * n >= 50 ms  =>  n >= 5e6; 1024 * 2^13 = 8_388_608 is the first doubling.
        assert_eq!(n, 8_388_608);
        assert_eq!(p.calls, 14);
    }

    #[test]
    fn vacuous_lower_bound_keeps_the_seed() {
        let mut p = Linear {
            per_elem: 10,
            bytes_per_elem: 8,
            overhead: 0,
            calls: 0,
        };
        assert_eq!(
            search_problem_size(&mut p, 1024, &c(1, 1_000_000_000, u64::MAX)).unwrap(),
            1024
        );
        assert_eq!(p.calls, 1);
    }

    #[test]
    fn data_cap_before_t_min_is_infeasible() {
        let mut p = Linear {
            per_elem: 10,
            bytes_per_elem: 1 << 20,
            overhead: 0,
            calls: 0,
        };
        match search_problem_size(&mut p, 1024, &c(50_000_000, 60_000_000_000, 1 << 32)) {
            Err(MepBuildError::ConstraintsInfeasible { s_data_bytes, .. }) => {
                assert!(s_data_bytes > 1 << 32)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bisection_finds_size_between_t_min_and_budget() {
        // t_min = 1000 ns; t_overall = 3 t_ker must stay <= 3100 ns.
        // Doubling from 1: 512 -> 1024 meets t_min but 3072+overhead breaks t_max.
        let mut p = Linear {
            per_elem: 1,
            bytes_per_elem: 1,
            overhead: 100,
            calls: 0,
        };
        let n = search_problem_size(&mut p, 1, &c(1_000, 3_100, u64::MAX)).unwrap();
        assert!((1_000..=1_000).contains(&n), "{n}");
    }

    #[test]
    fn empty_bracket_reports_frontier() {
        let mut p = Linear {
            per_elem: 1,
            bytes_per_elem: 1,
            overhead: 0,
            calls: 0,
        };
        match search_problem_size(&mut p, 1, &c(1_000, 2_500, u64::MAX)) {
            Err(MepBuildError::ConstraintsInfeasible {
                problem_size,
                t_ker_ns,
                ..
            }) => {
                assert!(t_ker_ns >= 1_000);
                assert!(problem_size >= 1_000);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn doubling_budget_is_forty_probes() {
        let mut p = Linear {
            per_elem: 0,
            bytes_per_elem: 0,
            overhead: 0,
            calls: 0,
        };
        assert!(matches!(
            search_problem_size(&mut p, 1, &c(1, 10, 10)),
            Err(MepBuildError::ConstraintsInfeasible { .. })
        ));
        assert_eq!(p.calls, MAX_DOUBLING_PROBES);
    }

    struct Dropping;
    impl SizeProbe for Dropping {
        fn probe(&mut self, n: u64) -> Result<ProbeResult, MepBuildError> {
            let t = if n >= 4096 { 20_000 } else { 100_000 };
            Ok(ProbeResult {
                t_ker_ns: t,
                t_overall_ns: t,
                s_data_bytes: 0,
            })
        }
    }

    #[test]
    fn falling_runtime_aborts_as_non_monotonic() {
        assert!(matches!(
            search_problem_size(&mut Dropping, 1024, &c(1_000_000, 10_000_000, 1)),
            Err(MepBuildError::NonMonotonic {
                from_size: 2048,
                to_size: 4096,
                ..
            })
        ));
    }

    #[test]
    fn tail_respects_char_boundaries() {
        assert_eq!(tail("abc", 10), "abc");
        assert_eq!(tail("aé", 1), "");
        assert_eq!(tail("abcdef", 2), "ef");
    }
}
