//! The round loop.
//!
//! Each round re-measures the current baseline, asks the model for up to N
//! candidate kernel regions, and pushes every candidate through
//! dedup, splice, compile, run, output comparison against the round
//! baseline, and timing. Failures go back to the model for repair. The
//! fastest feasible candidate is selected; it becomes the next baseline only
//! when it is actually faster, which keeps the baseline sequence
//! non-increasing.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use crate::domain::{
    Candidate, CandidateStatus, ClosingMeasurement, DomainError, KernelSource, MeasurementSet,
    Nanos, OptimizerConfig, RoundRecord, Session, SessionMode, SessionStatus, StopReason,
};
use crate::equivalence::{fe_check, FeReport, Tolerance};
use crate::llm::prompt::{render_patterns, PromptContext, PromptSet, NO_PATTERNS_MARKER};
use crate::llm::{invoke, Backend, LlmError, LlmRequest, Stage};
use crate::measurement::{collect_samples, compute_speedup, MeasurementError, SamplingPlan};
use crate::mep_builder::{tail, OUTPUT_FILE_NAME};
use crate::patterns::{extract_patterns, PatternError, PatternStore, WinnerSummary};
use crate::protocol::parse_run_report;
use crate::session::{self, write_atomic, write_json, SessionError, SessionLayout};
use crate::toolchain::{self, ToolchainError, ToolchainProfile};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("model backend failure: {0}")]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Patterns(#[from] PatternError),
    #[error("{context}: {source}")]
    Toolchain {
        context: String,
        #[source]
        source: ToolchainError,
    },
    #[error("{context}: {source}")]
    Measurement {
        context: String,
        #[source]
        source: MeasurementError,
    },
    #[error("baseline kernel failed: {0}")]
    BaselineFailed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    /// Stopped on request after the given number of rounds.
    Halted {
        rounds: u32,
    },
}

/// Collaborators of the loop.
pub struct Engine<'a> {
    pub profile: &'a ToolchainProfile,
    pub backend: &'a dyn Backend,
    pub prompts: &'a PromptSet,
    /// Argv template whose stdout is passed to the model verbatim.
    pub profiler: Option<&'a [String]>,
    /// Pattern store file; `None` keeps patterns in memory only.
    pub patterns_path: Option<PathBuf>,
    /// Return [`RunOutcome::Halted`] once this round has been persisted.
    pub halt_after_round: Option<u32>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OptimizeError + '_ {
    move |source| OptimizeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), OptimizeError> {
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// Argmin of the trimmed mean over feasible candidates; ties go to the
/// lowest candidate index.
pub fn select_baseline(candidates: &[Candidate]) -> Option<u32> {
    candidates
        .iter()
        .filter(|c| c.is_feasible())
        .filter_map(|c| c.trimmed_mean_ns().map(|m| (m, c.candidate_index)))
        .min()
        .map(|(_, idx)| idx)
}

/// Relative improvement of the selected candidate over the round baseline.
pub fn round_improvement(round: &RoundRecord) -> f64 {
    let base = round.baseline_measurement.trimmed_mean_ns as f64;
    match round
        .selected_candidate()
        .and_then(Candidate::trimmed_mean_ns)
    {
        Some(w) if base > 0.0 => (base - w as f64) / base,
        _ => 0.0,
    }
}

/// Stop after round `d` when the round cap is reached, the feasible set was
/// empty, or the improvement over the round baseline is below epsilon.
pub fn should_stop(
    config: &OptimizerConfig,
    rounds_cap: u32,
    d: u32,
    round: &RoundRecord,
) -> Option<StopReason> {
    if d + 1 >= rounds_cap {
        return Some(StopReason::RoundCap);
    }
    if round.carried_over {
        return Some(StopReason::CarriedOver);
    }
    let improvement = round_improvement(round);
    if improvement < config.improvement_epsilon {
        return Some(StopReason::BelowThreshold { improvement });
    }
    None
}

/// A built and measured kernel.
struct Measured {
    set: MeasurementSet,
    exe: PathBuf,
    output: PathBuf,
}

fn build_kernel(
    session: &Session,
    profile: &ToolchainProfile,
    dir: &Path,
    kernel_text: &str,
) -> Result<PathBuf, OptimizeError> {
    let sources = session.mep.splice(kernel_text)?;
    toolchain::write_sources(&dir.join("src"), &sources).map_err(|source| {
        OptimizeError::Toolchain {
            context: format!("writing sources to {}", dir.display()),
            source,
        }
    })?;
    toolchain::compile(profile, dir, Some(&dir.join("build.log"))).map_err(|source| {
        OptimizeError::Toolchain {
            context: format!("building {}", dir.display()),
            source,
        }
    })?;
    Ok(toolchain::exe_path(dir))
}

fn plan(config: &OptimizerConfig) -> SamplingPlan {
    SamplingPlan {
        runs: config.runs_r,
        trim_k: config.trim_k,
        warmup_runs: config.warmup_runs,
    }
}

/// Builds and measures a known-good kernel (baseline or closing runs).
fn measure_reference(
    session: &Session,
    profile: &ToolchainProfile,
    dir: &Path,
    kernel_text: &str,
) -> Result<Measured, OptimizeError> {
    fresh_dir(dir)?;
    let exe = build_kernel(session, profile, dir, kernel_text)
        .map_err(|e| OptimizeError::BaselineFailed(e.to_string()))?;
    let run = collect_samples(
        profile,
        &exe,
        session.mep.problem_size,
        Path::new(OUTPUT_FILE_NAME),
        plan(&session.config),
        Some(&dir.join("run.log")),
    )
    .map_err(|e| OptimizeError::BaselineFailed(format!("{}: {e}", dir.display())))?;
    write_json(&dir.join("measurements.json"), &run.set)?;
    let output = run
        .output_file
        .unwrap_or_else(|| dir.join(OUTPUT_FILE_NAME));
    Ok(Measured {
        set: run.set,
        exe,
        output,
    })
}

fn fresh_dir(dir: &Path) -> Result<(), OptimizeError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Where a candidate failed, for repair prompts and final status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureStage {
    Compile,
    Runtime,
    Fe,
    Protocol,
}

impl FailureStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureStage::Compile => "compile",
            FailureStage::Runtime => "runtime",
            FailureStage::Fe => "fe",
            FailureStage::Protocol => "protocol",
        }
    }

    fn terminal_status(self) -> CandidateStatus {
        match self {
            FailureStage::Compile => CandidateStatus::BuildFailed,
            FailureStage::Runtime | FailureStage::Protocol => CandidateStatus::RunFailed,
            FailureStage::Fe => CandidateStatus::FeFailed,
        }
    }
}

struct Failure {
    stage: FailureStage,
    diagnostics: String,
}

fn run_diagnostics(e: &ToolchainError) -> String {
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

/// Context shared by all candidates of one round.
struct RoundContext<'a> {
    session: &'a Session,
    engine: &'a Engine<'a>,
    layout: &'a SessionLayout,
    d: u32,
    baseline_output: &'a Path,
    tolerance: Tolerance,
}

/// Compile, run once, compare outputs, then time. `Err` carries a code fault
/// to route to repair; infrastructure errors abort via the outer result.
fn evaluate_once(
    rc: &RoundContext<'_>,
    kernel_text: &str,
    dir: &Path,
) -> Result<Result<MeasurementSet, Failure>, OptimizeError> {
    let session = rc.session;
    let profile = rc.engine.profile;
    fresh_dir(dir)?;
    let sources = match session.mep.splice(kernel_text) {
        Ok(s) => s,
        Err(e) => {
            return Ok(Err(Failure {
                stage: FailureStage::Compile,
                diagnostics: e.to_string(),
            }))
        }
    };
    toolchain::write_sources(&dir.join("src"), &sources).map_err(|source| {
        OptimizeError::Toolchain {
            context: format!("writing sources to {}", dir.display()),
            source,
        }
    })?;
    let build_log = dir.join("build.log");
    match toolchain::compile(profile, dir, Some(&build_log)) {
        Ok(_) => {}
        Err(ToolchainError::CompileFailed { result }) => {
            return Ok(Err(Failure {
                stage: FailureStage::Compile,
                diagnostics: result.stderr,
            }))
        }
        Err(source) => {
            return Err(OptimizeError::Toolchain {
                context: format!("compiling {}", dir.display()),
                source,
            })
        }
    }
    let exe = toolchain::exe_path(dir);
    let run_log = dir.join("run.log");
    let result = match toolchain::execute(
        profile,
        &exe,
        session.mep.problem_size,
        Path::new(OUTPUT_FILE_NAME),
        Some(&run_log),
    ) {
        Ok(r) => r,
        Err(e) if e.is_code_fault() => {
            return Ok(Err(Failure {
                stage: FailureStage::Runtime,
                diagnostics: run_diagnostics(&e),
            }))
        }
        Err(source) => {
            return Err(OptimizeError::Toolchain {
                context: format!("running {}", exe.display()),
                source,
            })
        }
    };
    let report = match parse_run_report(&result.stdout) {
        Ok(r) if r.status_ok => r,
        Ok(_) => {
            return Ok(Err(Failure {
                stage: FailureStage::Protocol,
                diagnostics: format!(
                    "missing `MEP_STATUS OK` line\n--- stdout\n{}\n--- stderr\n{}",
                    tail(&result.stdout, 4_000),
                    tail(&result.stderr, 4_000)
                ),
            }))
        }
        Err(e) => {
            return Ok(Err(Failure {
                stage: FailureStage::Protocol,
                diagnostics: format!("{e}\n--- stdout\n{}", tail(&result.stdout, 4_000)),
            }))
        }
    };
    let output = report
        .output_file
        .as_ref()
        .map(|p| dir.join(p))
        .unwrap_or_else(|| dir.join(OUTPUT_FILE_NAME));
    let fe: FeReport = fe_check(rc.baseline_output, Some(&output), rc.tolerance);
    write_json(&dir.join("fe_report.json"), &fe)?;
    if !fe.equivalent {
        return Ok(Err(Failure {
            stage: FailureStage::Fe,
            diagnostics: fe.diagnostics(),
        }));
    }
    let run = match collect_samples(
        profile,
        &exe,
        session.mep.problem_size,
        Path::new(OUTPUT_FILE_NAME),
        plan(&session.config),
        Some(&run_log),
    ) {
        Ok(run) => run,
        Err(e) => {
            let stage = match &e {
                MeasurementError::Protocol { .. } | MeasurementError::StatusNotOk { .. } => {
                    FailureStage::Protocol
                }
                MeasurementError::Run { source, .. } if !source.is_code_fault() => {
                    return Err(OptimizeError::Measurement {
                        context: format!("measuring {}", exe.display()),
                        source: e,
                    })
                }
                _ => FailureStage::Runtime,
            };
            let mut diagnostics = e.to_string();
            if let MeasurementError::Run { source, .. } = &e {
                diagnostics = format!("{e}\n{}", run_diagnostics(source));
            }
            return Ok(Err(Failure { stage, diagnostics }));
        }
    };
    write_json(&dir.join("measurements.json"), &run.set)?;
    Ok(Ok(run.set))
}

fn repair_scope(dialect_entry: &str) -> String {
    format!(
        "Return only the corrected kernel region (kernel definition and launch configuration). \
         Keep the entry symbol `{dialect_entry}` and its signature; the harness is fixed."
    )
}

/// Runs one candidate through the pipeline, repairing code faults.
///
/// Direct mode only repairs compile failures. A backend error during repair
/// ends the candidate with the status of its last failure.
fn process_candidate(
    rc: &RoundContext<'_>,
    n: u32,
    generated: &KernelSource,
    seen: &mut HashSet<String>,
) -> Result<Candidate, OptimizeError> {
    let session = rc.session;
    let config = &session.config;
    let cand_dir = rc.layout.candidate_dir(rc.d, n);
    let generated_hash = generated.digest();
    let mut candidate = Candidate {
        round_index: rc.d,
        candidate_index: n,
        source: generated.clone(),
        generated_hash: generated_hash.clone(),
        status: CandidateStatus::Generated,
        repair_count: 0,
        measurement: None,
        diagnostics: String::new(),
    };
    write_text(&cand_dir.join("kernel.src"), &generated.source_text)?;
    if !seen.insert(generated_hash) {
        candidate.status = CandidateStatus::SkippedDuplicate;
        candidate.diagnostics = "identical to the baseline or an earlier candidate\n".into();
        return Ok(candidate);
    }
    loop {
        let dir = cand_dir.join(format!("build_{}", candidate.repair_count));
        let failure = match evaluate_once(rc, &candidate.source.source_text, &dir)? {
            Ok(set) => {
                candidate.measurement = Some(set);
                candidate.status = CandidateStatus::Feasible;
                break;
            }
            Err(f) => f,
        };
        candidate.diagnostics.push_str(&format!(
            "attempt {}: {} failure\n{}\n",
            candidate.repair_count,
            failure.stage.as_str(),
            failure.diagnostics.trim_end()
        ));
        let repair_allowed = match session.mode {
            SessionMode::Feedback => true,
            SessionMode::Direct => failure.stage == FailureStage::Compile,
        };
        if !repair_allowed || candidate.repair_count >= config.repair_attempts_max {
            candidate.status = failure.stage.terminal_status();
            break;
        }
        match repair_candidate(rc, &mut candidate, &failure)? {
            true => {}
            false => {
                candidate.status = failure.stage.terminal_status();
                break;
            }
        }
    }
    write_text(&cand_dir.join("kernel.src"), &candidate.source.source_text)?;
    Ok(candidate)
}

/// Asks the model to fix `candidate`; returns false when the backend could
/// not deliver a usable answer.
fn repair_candidate(
    rc: &RoundContext<'_>,
    candidate: &mut Candidate,
    failure: &Failure,
) -> Result<bool, OptimizeError> {
    let attempt = candidate.repair_count + 1;
    let mut ctx = PromptContext::new();
    ctx.insert("dialect", candidate.source.dialect.to_string());
    ctx.insert("failure_stage", failure.stage.as_str().to_string());
    ctx.insert("failing_source", candidate.source.source_text.clone());
    ctx.insert("diagnostics", failure.diagnostics.clone());
    ctx.insert("repair_scope", repair_scope(&candidate.source.entry_symbol));
    let prompt = rc.engine.prompts.render(Stage::Repair, &ctx)?;
    let request = LlmRequest {
        stage: Stage::Repair,
        prompt: prompt.clone(),
        round_index: rc.d,
        candidate_index: Some(candidate.candidate_index),
        attempt,
        temperature_hint: 0.0,
    };
    let record = rc
        .layout
        .candidate_dir(rc.d, candidate.candidate_index)
        .join(format!("repair_{attempt}.md"));
    match invoke(rc.engine.backend, &request) {
        Ok(response) => {
            write_text(
                &record,
                &format!("## Prompt\n\n{prompt}\n\n## Response\n\n{}\n", response.raw),
            )?;
            let text = response
                .last_block()
                .map(|b| b.text.clone())
                .unwrap_or_default();
            candidate.source = candidate.source.with_text(text);
            candidate.repair_count = attempt;
            candidate.status = CandidateStatus::Repaired;
            Ok(true)
        }
        Err(e) => {
            warn!(
                "repair of candidate {} in round {} failed: {e}",
                candidate.candidate_index, rc.d
            );
            write_text(
                &record,
                &format!("## Prompt\n\n{prompt}\n\n## Error\n\n{e}\n"),
            )?;
            candidate
                .diagnostics
                .push_str(&format!("repair request failed: {e}\n"));
            Ok(false)
        }
    }
}

fn measurement_summary(session: &Session, baseline: &MeasurementSet) -> String {
    let mut out = format!(
        "Baseline trimmed mean: {} ns (R={} runs, {} trimmed from each end).\n",
        baseline.trimmed_mean_ns,
        baseline.samples_ns.len(),
        baseline.trim_k
    );
    if let Some(initial) = &session.initial_baseline_measurement {
        out.push_str(&format!(
            "Original kernel: {} ns.\n",
            initial.trimmed_mean_ns
        ));
    }
    for r in &session.rounds {
        let best = r
            .selected_candidate()
            .and_then(|c| c.trimmed_mean_ns().map(|m| (c.candidate_index, m)));
        match best {
            Some((n, m)) => out.push_str(&format!(
                "Round {}: baseline {} ns, best candidate {n} at {m} ns{}.\n",
                r.index,
                r.baseline_measurement.trimmed_mean_ns,
                if r.adopted {
                    " (adopted)"
                } else {
                    " (not faster)"
                }
            )),
            None => out.push_str(&format!(
                "Round {}: baseline {} ns, no feasible candidate.\n",
                r.index, r.baseline_measurement.trimmed_mean_ns
            )),
        }
        for c in &r.candidates {
            if c.status != CandidateStatus::Feasible {
                out.push_str(&format!(
                    "  candidate {}: {}\n",
                    c.candidate_index,
                    c.status.as_str()
                ));
            }
        }
    }
    out
}

fn profiler_feedback(
    session: &Session,
    engine: &Engine<'_>,
    exe: &Path,
) -> Result<String, OptimizeError> {
    let Some(template) = engine.profiler else {
        return Ok("(no profiler configured)".into());
    };
    match toolchain::run_hook(
        template,
        engine.profile,
        exe,
        session.mep.problem_size,
        Path::new(OUTPUT_FILE_NAME),
    ) {
        Ok(r) => Ok(r.stdout),
        Err(e) if !e.is_code_fault() => Err(OptimizeError::Toolchain {
            context: "running the profiler".into(),
            source: e,
        }),
        Err(e) => {
            warn!("profiler failed: {e}");
            Ok(format!("(profiler failed: {})", e))
        }
    }
}

/// Hashes that candidates must not repeat: every baseline and every
/// candidate generated so far in the session.
fn seen_hashes(session: &Session) -> HashSet<String> {
    let mut seen = HashSet::new();
    seen.insert(session.baseline_kernel.digest());
    for r in &session.rounds {
        seen.insert(r.baseline_source_hash.clone());
        for c in &r.candidates {
            seen.insert(c.generated_hash.clone());
            seen.insert(c.source.digest());
        }
    }
    seen
}

fn injects_patterns(session: &Session) -> bool {
    session.mode == SessionMode::Feedback && session.config.pattern_inject_max > 0
}

/// Runs round `d` against the current baseline and returns its record.
pub fn run_round(
    session: &Session,
    engine: &Engine<'_>,
    store: &PatternStore,
    d: u32,
) -> Result<RoundRecord, OptimizeError> {
    let layout = SessionLayout::new(&session.session_dir);
    let baseline = session.current_baseline().clone();
    let base = measure_reference(
        session,
        engine.profile,
        &layout.round_baseline_dir(d),
        &baseline.source_text,
    )?;
    info!("round {d}: baseline {} ns", base.set.trimmed_mean_ns);

    let direct = session.mode == SessionMode::Direct;
    let (summary, profile_text) = if direct {
        ("(not provided)".to_string(), "(not provided)".to_string())
    } else {
        (
            measurement_summary(session, &base.set),
            profiler_feedback(session, engine, &base.exe)?,
        )
    };
    let patterns = if injects_patterns(session) {
        render_patterns(&store.top_patterns(session.config.pattern_inject_max as usize))
    } else {
        NO_PATTERNS_MARKER.to_string()
    };
    let n_max = session.effective_candidates();
    let rc = RoundContext {
        session,
        engine,
        layout: &layout,
        d,
        baseline_output: &base.output,
        tolerance: Tolerance {
            rel: session.config.fe_rel_tol,
            abs: session.config.fe_abs_tol,
        },
    };
    let mut seen = seen_hashes(session);
    seen.insert(baseline.digest());
    let mut candidates = Vec::with_capacity(n_max as usize);
    for n in 1..=n_max {
        let mut ctx = PromptContext::new();
        ctx.insert("dialect", baseline.dialect.to_string());
        ctx.insert("kernel_name", baseline.name.clone());
        ctx.insert("round_index", d.to_string());
        ctx.insert("candidate_index", n.to_string());
        ctx.insert("candidates_n", n_max.to_string());
        ctx.insert("baseline_source", baseline.source_text.clone());
        ctx.insert("measurement_summary", summary.clone());
        ctx.insert("profiler_feedback", profile_text.clone());
        ctx.insert("patterns", patterns.clone());
        ctx.insert("entry_symbol", baseline.entry_symbol.clone());
        ctx.insert("fe_rel_tol", session.config.fe_rel_tol.to_string());
        ctx.insert("fe_abs_tol", session.config.fe_abs_tol.to_string());
        let prompt = engine.prompts.render(Stage::GenerateCandidates, &ctx)?;
        write_text(&layout.candidate_dir(d, n).join("prompt.md"), &prompt)?;
        let request = LlmRequest {
            stage: Stage::GenerateCandidates,
            prompt,
            round_index: d,
            candidate_index: Some(n),
            attempt: 0,
            temperature_hint: session.config.generation_temperature,
        };
        let text = match invoke(engine.backend, &request) {
            Ok(r) => r.last_block().map(|b| b.text.clone()).unwrap_or_default(),
            Err(LlmError::EmptyResponse { raw, .. }) => {
                warn!("candidate {n} in round {d}: response has no code block");
                let mut c = Candidate {
                    round_index: d,
                    candidate_index: n,
                    source: baseline.with_text(raw.clone()),
                    generated_hash: crate::domain::digest_text(&raw),
                    status: CandidateStatus::BuildFailed,
                    repair_count: 0,
                    measurement: None,
                    diagnostics: "response contained no code block\n".into(),
                };
                if !seen.insert(c.generated_hash.clone()) {
                    c.status = CandidateStatus::SkippedDuplicate;
                }
                candidates.push(c);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let generated = baseline.with_text(text);
        let c = process_candidate(&rc, n, &generated, &mut seen)?;
        info!(
            "round {d} candidate {n}: {} {}",
            c.status.as_str(),
            c.trimmed_mean_ns()
                .map(|m| format!("{m} ns"))
                .unwrap_or_default()
        );
        seen.insert(c.source.digest());
        candidates.push(c);
    }

    let selected = select_baseline(&candidates);
    let carried_over = selected.is_none();
    let adopted = selected
        .and_then(|i| candidates.iter().find(|c| c.candidate_index == i))
        .and_then(Candidate::trimmed_mean_ns)
        .is_some_and(|m| m < base.set.trimmed_mean_ns);
    let mut round = RoundRecord {
        index: d,
        baseline_source_hash: baseline.digest(),
        baseline_measurement: base.set,
        candidates,
        selected,
        carried_over,
        adopted,
        stop: None,
    };
    round.stop = should_stop(&session.config, session.effective_rounds(), d, &round);
    Ok(round)
}

fn extract_round_patterns(
    session: &Session,
    engine: &Engine<'_>,
    store: &mut PatternStore,
    round: &RoundRecord,
    baseline_text: &str,
) {
    let (Some(winner), Some(speedup)) = (round.selected_candidate(), round.winner_speedup()) else {
        return;
    };
    let Some(winner_mean) = winner.trimmed_mean_ns() else {
        return;
    };
    let summary = WinnerSummary {
        kernel: &session.kernel,
        round_index: round.index,
        winner_index: winner.candidate_index,
        baseline_source: baseline_text,
        winner_source: &winner.source.source_text,
        baseline_mean_ns: round.baseline_measurement.trimmed_mean_ns,
        winner_mean_ns: winner_mean,
        speedup,
    };
    extract_patterns(
        store,
        &summary,
        session.config.improvement_epsilon,
        engine.backend,
        engine.prompts,
    );
}

fn closing(session: &Session, engine: &Engine<'_>) -> Result<ClosingMeasurement, OptimizeError> {
    let layout = SessionLayout::new(&session.session_dir);
    let root = layout.closing_dir();
    let final_kernel = session.current_baseline().clone();
    let initial = measure_reference(
        session,
        engine.profile,
        &root.join("initial"),
        &session.baseline_kernel.source_text,
    )?;
    let last = measure_reference(
        session,
        engine.profile,
        &root.join("final"),
        &final_kernel.source_text,
    )?;
    let tolerance = Tolerance {
        rel: session.config.fe_rel_tol,
        abs: session.config.fe_abs_tol,
    };
    let fe = fe_check(&initial.output, Some(&last.output), tolerance);
    write_json(&root.join("fe_report.json"), &fe)?;
    if !fe.equivalent {
        warn!(
            "final kernel output drifted from the original: {}",
            fe.diagnostics()
        );
    }
    Ok(ClosingMeasurement {
        initial: initial.set,
        final_baseline: last.set,
        final_source_hash: final_kernel.digest(),
        final_matches_initial: fe.equivalent,
    })
}

fn export_winner(session: &Session) -> Result<(), OptimizeError> {
    let layout = SessionLayout::new(&session.session_dir);
    let dir = layout.winner_dir();
    let winner = session.current_baseline();
    write_text(&dir.join("kernel.src"), &winner.source_text)?;
    let origin = session
        .rounds
        .iter()
        .rev()
        .find(|r| r.adopted)
        .map(|r| {
            format!(
                "round {} candidate {}",
                r.index,
                r.selected.unwrap_or_default()
            )
        })
        .unwrap_or_else(|| "the original kernel (no faster candidate was found)".into());
    let speedup = session
        .final_speedup
        .map(|s| format!("{s:.4}x"))
        .unwrap_or_else(|| "n/a".into());
    let note = format!(
        "# Integrating the optimized `{name}` kernel\n\n\
         `kernel.src` holds the kernel region from {origin}. Standalone speedup \
         measured in the MEP: {speedup}.\n\n\
         Steps:\n\n\
         1. Replace the definition of `{entry}` (and its launch configuration) in the \
         application with the contents of `kernel.src`.\n\
         2. Keep the original signature; the MEP harness called it unchanged.\n\
         3. Rebuild the application and rerun its own correctness tests. The MEP \
         validated outputs only for its generated inputs at problem size {size}.\n\
         4. Measure end-to-end: the speedup inside the application can differ from \
         the standalone figure.\n",
        name = session.kernel.name,
        entry = session.kernel.entry_symbol,
        size = session.mep.problem_size,
    );
    write_text(&dir.join("INTEGRATION.md"), &note)
}

/// Runs (or resumes) the loop until it stops, then performs the closing
/// re-measurement, exports the winner and marks the session completed.
///
/// Rounds already present in `session.rounds` are kept; directories of
/// rounds that never committed their `round.json` are discarded first.
pub fn run_session(
    session: &mut Session,
    engine: &Engine<'_>,
) -> Result<RunOutcome, OptimizeError> {
    let layout = SessionLayout::new(&session.session_dir);
    session::discard_partial_rounds(&layout, session.rounds.len() as u32)?;
    if session.status == SessionStatus::Completed {
        return Ok(RunOutcome::Completed);
    }
    if session.initial_baseline_measurement.is_none() {
        let m = measure_reference(
            session,
            engine.profile,
            &layout.initial_baseline_dir(),
            &session.baseline_kernel.source_text,
        )?;
        info!("initial baseline: {} ns", m.set.trimmed_mean_ns);
        session.initial_baseline_measurement = Some(m.set);
        session::save_session(session)?;
    }

    let use_store = injects_patterns(session);
    let mut store = match (&engine.patterns_path, use_store) {
        (Some(path), true) => PatternStore::load(path)?,
        _ => PatternStore::default(),
    };

    while !session.loop_finished() {
        let d = session.rounds.len() as u32;
        let baseline_text = session.current_baseline().source_text.clone();
        let round = run_round(session, engine, &store, d)?;
        session::save_round(&layout, &round)?;
        if use_store && round.adopted {
            extract_round_patterns(session, engine, &mut store, &round, &baseline_text);
            if let Some(path) = &engine.patterns_path {
                store.save(path)?;
            }
            if engine.patterns_path.as_deref() != Some(layout.patterns_json().as_path()) {
                store.save(&layout.patterns_json())?;
            }
        }
        session.rounds.push(round);
        session::save_session(session)?;
        if engine.halt_after_round == Some(d) && !session.loop_finished() {
            return Ok(RunOutcome::Halted { rounds: d + 1 });
        }
    }

    if session.closing.is_none() {
        let c = closing(session, engine)?;
        let speedup = compute_speedup(c.initial.trimmed_mean_ns, c.final_baseline.trimmed_mean_ns)
            .map_err(|source| OptimizeError::Measurement {
                context: "final speedup".into(),
                source,
            })?;
        session.final_speedup = Some(speedup);
        session.closing = Some(c);
        session::save_session(session)?;
    }
    export_winner(session)?;
    session.status = SessionStatus::Completed;
    session::save_session(session)?;
    Ok(RunOutcome::Completed)
}

/// Chained baseline means never increase.
pub fn is_non_increasing(trajectory: &[f64]) -> bool {
    trajectory.windows(2).all(|w| w[1] <= w[0])
}

/// Shortcut for tests and the report: the round baseline mean sequence as
/// measured (not chained).
pub fn measured_baselines(rounds: &[RoundRecord]) -> Vec<Nanos> {
    rounds
        .iter()
        .map(|r| r.baseline_measurement.trimmed_mean_ns)
        .collect()
}
