//! Shared value types for kernels, programs, candidates, rounds and sessions.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::measurement;

/// Durations are integer nanoseconds end to end.
pub type Nanos = u64;

/// Marker line opening the replaceable kernel region of an MEP source.
pub const KERNEL_BEGIN_MARKER: &str = "MEP_KERNEL_BEGIN";
/// Marker line closing the replaceable kernel region of an MEP source.
pub const KERNEL_END_MARKER: &str = "MEP_KERNEL_END";

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid MEP: {0}")]
    InvalidMep(String),
}

/// Hex SHA-256 of a text.
pub fn digest_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    Cuda,
    Hip,
    CToy,
}

impl Dialect {
    /// File name of the MEP main source for this dialect.
    pub fn main_source_name(self) -> &'static str {
        match self {
            Dialect::Cuda => "mep.cu",
            Dialect::Hip => "mep.cpp",
            Dialect::CToy => "mep.c",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dialect::Cuda => "cuda",
            Dialect::Hip => "hip",
            Dialect::CToy => "c_toy",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An extracted hotspot kernel; the object being optimized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSource {
    pub name: String,
    pub source_text: String,
    pub dialect: Dialect,
    pub entry_symbol: String,
}

impl KernelSource {
    pub fn new(
        name: impl Into<String>,
        source_text: impl Into<String>,
        dialect: Dialect,
        entry_symbol: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let kernel = KernelSource {
            name: name.into(),
            source_text: source_text.into(),
            dialect,
            entry_symbol: entry_symbol.into(),
        };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.source_text.trim().is_empty() {
            return Err(DomainError::InvalidKernel("source_text is empty".into()));
        }
        if !is_identifier(&self.name) {
            return Err(DomainError::InvalidKernel(format!(
                "kernel name {:?} is not an identifier",
                self.name
            )));
        }
        if !is_identifier(&self.entry_symbol) {
            return Err(DomainError::InvalidKernel(format!(
                "entry symbol {:?} is not an identifier",
                self.entry_symbol
            )));
        }
        Ok(())
    }

    /// Same kernel identity with different text.
    pub fn with_text(&self, text: impl Into<String>) -> KernelSource {
        KernelSource {
            source_text: text.into(),
            ..self.clone()
        }
    }

    pub fn digest(&self) -> String {
        digest_text(&self.source_text)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Time and data limits an MEP has to respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MepConstraints {
    /// Minimum significant kernel time.
    pub t_min_ns: Nanos,
    /// Budget for one whole MEP execution.
    pub t_max_ns: Nanos,
    /// Cap on generated input data.
    pub s_max_bytes: u64,
}

impl MepConstraints {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.t_min_ns == 0 {
            return Err(DomainError::InvalidConfig("t_min must be > 0".into()));
        }
        if self.t_max_ns <= self.t_min_ns {
            return Err(DomainError::InvalidConfig(format!(
                "t_max ({} ns) must be > t_min ({} ns)",
                self.t_max_ns, self.t_min_ns
            )));
        }
        if self.s_max_bytes == 0 {
            return Err(DomainError::InvalidConfig("s_max must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub filename: String,
    pub text: String,
}

/// A runnable program wrapping the kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MepProgram {
    pub sources: Vec<SourceFile>,
    /// Scalar scale parameter passed as argv[1].
    pub problem_size: u64,
    /// Input bytes reported by the program at `problem_size`.
    pub reported_data_bytes: u64,
    /// Directory of the validated build, relative to the session directory.
    pub build_artifacts_dir: PathBuf,
    #[serde(default)]
    pub repair_count: u32,
}

impl MepProgram {
    /// Locates the single source carrying the kernel splice markers and
    /// returns `(source index, byte range of the region)`.
    pub fn kernel_region(&self) -> Result<(usize, std::ops::Range<usize>), DomainError> {
        let mut found = None;
        for (idx, src) in self.sources.iter().enumerate() {
            if let Some(range) = marker_region(&src.text)? {
                if found.is_some() {
                    return Err(DomainError::InvalidMep(
                        "kernel markers appear in more than one source".into(),
                    ));
                }
                found = Some((idx, range));
            }
        }
        found.ok_or_else(|| {
            DomainError::InvalidMep(format!(
                "no source contains the {KERNEL_BEGIN_MARKER}/{KERNEL_END_MARKER} markers"
            ))
        })
    }

    /// Text between the splice markers.
    pub fn kernel_text(&self) -> Result<&str, DomainError> {
        let (idx, range) = self.kernel_region()?;
        Ok(&self.sources[idx].text[range])
    }

    /// Sources with the kernel region replaced by `kernel_text`.
    pub fn splice(&self, kernel_text: &str) -> Result<Vec<SourceFile>, DomainError> {
        let (idx, range) = self.kernel_region()?;
        let mut sources = self.sources.clone();
        let original = &self.sources[idx].text;
        let mut text = String::with_capacity(original.len() + kernel_text.len());
        text.push_str(&original[..range.start]);
        text.push_str(kernel_text);
        if !kernel_text.is_empty() && !kernel_text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&original[range.end..]);
        sources[idx].text = text;
        Ok(sources)
    }

    /// Checks the structural invariants: one marked region containing the
    /// entry symbol, and the data cap once a size has been validated.
    pub fn validate(
        &self,
        entry_symbol: &str,
        constraints: Option<&MepConstraints>,
    ) -> Result<(), DomainError> {
        if self.problem_size == 0 {
            return Err(DomainError::InvalidMep(
                "problem_size must be positive".into(),
            ));
        }
        let region = self.kernel_text()?;
        if !region.contains(entry_symbol) {
            return Err(DomainError::InvalidMep(format!(
                "kernel region does not contain entry symbol `{entry_symbol}`"
            )));
        }
        if let Some(c) = constraints {
            if self.reported_data_bytes > c.s_max_bytes {
                return Err(DomainError::InvalidMep(format!(
                    "reported data {} B exceeds s_max {} B",
                    self.reported_data_bytes, c.s_max_bytes
                )));
            }
        }
        Ok(())
    }
}

/// Finds the byte range strictly between the BEGIN line and the END line.
fn marker_region(text: &str) -> Result<Option<std::ops::Range<usize>>, DomainError> {
    let mut begin = None;
    let mut end = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.contains(KERNEL_BEGIN_MARKER) {
            if begin.is_some() {
                return Err(DomainError::InvalidMep("duplicate begin marker".into()));
            }
            begin = Some(offset + line.len());
        } else if line.contains(KERNEL_END_MARKER) {
            if end.is_some() {
                return Err(DomainError::InvalidMep("duplicate end marker".into()));
            }
            end = Some(offset);
        }
        offset += line.len();
    }
    match (begin, end) {
        (None, None) => Ok(None),
        (Some(b), Some(e)) if b <= e => Ok(Some(b..e)),
        (Some(_), Some(_)) => Err(DomainError::InvalidMep(
            "end marker precedes begin marker".into(),
        )),
        _ => Err(DomainError::InvalidMep("unpaired kernel marker".into())),
    }
}

/// Loop and measurement parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Maximum number of rounds.
    pub rounds_d: u32,
    /// Candidates generated per round.
    pub candidates_n: u32,
    /// Measured runs per timing.
    pub runs_r: u32,
    /// Samples dropped at each end before averaging.
    pub trim_k: u32,
    /// Minimum relative per-round improvement to keep iterating.
    pub improvement_epsilon: f64,
    pub fe_rel_tol: f64,
    pub fe_abs_tol: f64,
    pub repair_attempts_max: u32,
    pub warmup_runs: u32,
    pub pattern_inject_max: u32,
    /// Runs per probe during problem-size search.
    pub probe_runs: u32,
    pub probe_trim: u32,
    /// Starting problem size for the size search.
    pub seed_problem_size: u64,
    /// Temperature hint for candidate generation (repair always uses 0).
    pub generation_temperature: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::small_kernel()
    }
}

impl OptimizerConfig {
    /// D=6, N=3: small kernels with limited optimization space.
    pub fn small_kernel() -> Self {
        OptimizerConfig {
            rounds_d: 6,
            candidates_n: 3,
            runs_r: 30,
            trim_k: 3,
            improvement_epsilon: 0.01,
            fe_rel_tol: 1e-4,
            fe_abs_tol: 1e-6,
            repair_attempts_max: 3,
            warmup_runs: 2,
            pattern_inject_max: 5,
            probe_runs: 5,
            probe_trim: 1,
            seed_problem_size: 1024,
            generation_temperature: 0.7,
        }
    }

    /// D=10, N=5: larger kernels.
    pub fn complex_kernel() -> Self {
        OptimizerConfig {
            rounds_d: 10,
            candidates_n: 5,
            ..OptimizerConfig::small_kernel()
        }
    }
}

/// Returns the config unchanged iff every invariant holds.
pub fn validate_config(
    config: OptimizerConfig,
    constraints: &MepConstraints,
) -> Result<OptimizerConfig, DomainError> {
    let bad = |msg: String| Err(DomainError::InvalidConfig(msg));
    if config.candidates_n == 0 {
        return bad("candidates_n (N) must be positive".into());
    }
    if config.runs_r == 0 {
        return bad("runs_r (R) must be positive".into());
    }
    if u64::from(config.runs_r) <= 2 * u64::from(config.trim_k) {
        return bad(format!(
            "runs_r (R={}) must exceed 2*trim_k (2k={})",
            config.runs_r,
            2 * u64::from(config.trim_k)
        ));
    }
    if config.probe_runs == 0 || u64::from(config.probe_runs) <= 2 * u64::from(config.probe_trim) {
        return bad(format!(
            "probe_runs ({}) must exceed 2*probe_trim ({})",
            config.probe_runs,
            2 * u64::from(config.probe_trim)
        ));
    }
    if !(config.improvement_epsilon > 0.0 && config.improvement_epsilon < 1.0) {
        return bad(format!(
            "improvement_epsilon must lie in (0,1), got {}",
            config.improvement_epsilon
        ));
    }
    if !(config.fe_rel_tol >= 0.0) || !config.fe_rel_tol.is_finite() {
        return bad("fe_rel_tol must be a finite non-negative number".into());
    }
    if !(config.fe_abs_tol >= 0.0) || !config.fe_abs_tol.is_finite() {
        return bad("fe_abs_tol must be a finite non-negative number".into());
    }
    if config.repair_attempts_max == 0 {
        return bad("repair_attempts_max must be positive".into());
    }
    if config.seed_problem_size == 0 {
        return bad("seed_problem_size must be positive".into());
    }
    if !(config.generation_temperature >= 0.0) {
        return bad("generation_temperature must be non-negative".into());
    }
    constraints.validate()?;
    Ok(config)
}

/// Lifecycle of one candidate kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Generated,
    BuildFailed,
    RunFailed,
    FeFailed,
    Repaired,
    Feasible,
    SkippedDuplicate,
}

impl CandidateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateStatus::Generated => "generated",
            CandidateStatus::BuildFailed => "build_failed",
            CandidateStatus::RunFailed => "run_failed",
            CandidateStatus::FeFailed => "fe_failed",
            CandidateStatus::Repaired => "repaired",
            CandidateStatus::Feasible => "feasible",
            CandidateStatus::SkippedDuplicate => "skipped_duplicate",
        }
    }
}

/// R raw per-run kernel times plus the derived trimmed mean.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub samples_ns: Vec<Nanos>,
    pub trim_k: u32,
    pub warmup_runs: u32,
    pub trimmed_mean_ns: Nanos,
}

impl MeasurementSet {
    pub fn from_samples(
        samples_ns: Vec<Nanos>,
        trim_k: u32,
        warmup_runs: u32,
    ) -> Result<Self, measurement::MeasurementError> {
        let trimmed_mean_ns = measurement::trimmed_mean(&samples_ns, trim_k as usize)?;
        Ok(MeasurementSet {
            samples_ns,
            trim_k,
            warmup_runs,
            trimmed_mean_ns,
        })
    }

    /// True when the stored trimmed mean matches a recomputation from the samples.
    pub fn is_consistent(&self) -> bool {
        measurement::trimmed_mean(&self.samples_ns, self.trim_k as usize)
            .map(|m| m == self.trimmed_mean_ns)
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub round_index: u32,
    /// 1-based position within the round.
    pub candidate_index: u32,
    pub source: KernelSource,
    /// Digest of the source as first generated, before any repair.
    pub generated_hash: String,
    pub status: CandidateStatus,
    pub repair_count: u32,
    pub measurement: Option<MeasurementSet>,
    pub diagnostics: String,
}

impl Candidate {
    pub fn is_feasible(&self) -> bool {
        self.status == CandidateStatus::Feasible && self.measurement.is_some()
    }

    pub fn trimmed_mean_ns(&self) -> Option<Nanos> {
        self.measurement.as_ref().map(|m| m.trimmed_mean_ns)
    }
}

/// Why the loop ended after a given round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    RoundCap,
    CarriedOver,
    BelowThreshold { improvement: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: u32,
    pub baseline_source_hash: String,
    pub baseline_measurement: MeasurementSet,
    pub candidates: Vec<Candidate>,
    /// Argmin over the feasible set, ties to the lowest index.
    pub selected: Option<u32>,
    /// The feasible set was empty.
    pub carried_over: bool,
    /// The selected candidate beat the round baseline and opens the next round.
    pub adopted: bool,
    pub stop: Option<StopReason>,
}

impl RoundRecord {
    pub fn candidate(&self, index: u32) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.candidate_index == index)
    }

    pub fn selected_candidate(&self) -> Option<&Candidate> {
        self.selected.and_then(|i| self.candidate(i))
    }

    /// Baseline mean over the selected candidate's mean, when one was selected.
    pub fn winner_speedup(&self) -> Option<f64> {
        let winner = self.selected_candidate()?.trimmed_mean_ns()?;
        measurement::compute_speedup(self.baseline_measurement.trimmed_mean_ns, winner).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum PatternCategory {
    Tiling,
    Memory,
    Synchronization,
    Other,
}

impl PatternCategory {
    /// Maps free-text model output onto the fixed taxonomy.
    pub fn parse_loose(s: &str) -> PatternCategory {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiling" => PatternCategory::Tiling,
            "memory" => PatternCategory::Memory,
            "synchronization" | "synchronisation" => PatternCategory::Synchronization,
            _ => PatternCategory::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatternCategory::Tiling => "tiling",
            PatternCategory::Memory => "memory",
            PatternCategory::Synchronization => "synchronization",
            PatternCategory::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEvidence {
    pub kernel_name: String,
    pub round_index: u32,
    pub speedup: f64,
    /// Store-wide insertion sequence; larger is more recent.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    /// Digest of the normalized description.
    pub id: String,
    pub category: PatternCategory,
    pub description: String,
    pub hint_text: String,
    pub evidence: Vec<PatternEvidence>,
}

impl PatternRecord {
    pub fn max_speedup(&self) -> f64 {
        self.evidence
            .iter()
            .map(|e| e.speedup)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn latest_seq(&self) -> u64 {
        self.evidence.iter().map(|e| e.seq).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// Full feedback loop.
    #[default]
    Feedback,
    /// One generation, N=1, no feedback, no patterns, compile-fix only.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    #[default]
    Running,
    Completed,
}

/// Back-to-back timing of the original and the final kernel at session close.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosingMeasurement {
    pub initial: MeasurementSet,
    pub final_baseline: MeasurementSet,
    pub final_source_hash: String,
    /// Final kernel output still matches the original kernel output.
    pub final_matches_initial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    #[serde(skip)]
    pub session_dir: PathBuf,
    pub mode: SessionMode,
    pub status: SessionStatus,
    /// The kernel as supplied by the user.
    pub kernel: KernelSource,
    /// The kernel region of the built MEP (round 0 baseline).
    pub baseline_kernel: KernelSource,
    pub mep: MepProgram,
    pub config: OptimizerConfig,
    pub constraints: MepConstraints,
    /// Loaded from `rounds/<d>/round.json`, never embedded in session.json.
    #[serde(skip)]
    pub rounds: Vec<RoundRecord>,
    pub initial_baseline_measurement: Option<MeasurementSet>,
    pub closing: Option<ClosingMeasurement>,
    pub final_speedup: Option<f64>,
}

impl Session {
    pub fn new(
        session_dir: PathBuf,
        mode: SessionMode,
        kernel: KernelSource,
        mep: MepProgram,
        config: OptimizerConfig,
        constraints: MepConstraints,
    ) -> Result<Self, DomainError> {
        let region = mep.kernel_text()?.to_string();
        let baseline_kernel = kernel.with_text(region);
        Ok(Session {
            session_dir,
            mode,
            status: SessionStatus::Running,
            kernel,
            baseline_kernel,
            mep,
            config,
            constraints,
            rounds: Vec::new(),
            initial_baseline_measurement: None,
            closing: None,
            final_speedup: None,
        })
    }

    /// The baseline opening the next round: the most recently adopted winner,
    /// or the original kernel.
    pub fn current_baseline(&self) -> &KernelSource {
        self.rounds
            .iter()
            .rev()
            .find(|r| r.adopted)
            .and_then(|r| r.selected_candidate())
            .map(|c| &c.source)
            .unwrap_or(&self.baseline_kernel)
    }

    /// True once a round recorded a stop reason.
    pub fn loop_finished(&self) -> bool {
        self.rounds.last().is_some_and(|r| r.stop.is_some())
            || self.rounds.len() as u32 >= self.effective_rounds()
    }

    /// Round cap after applying the session mode.
    pub fn effective_rounds(&self) -> u32 {
        match self.mode {
            SessionMode::Feedback => self.config.rounds_d,
            SessionMode::Direct => 1,
        }
    }

    pub fn effective_candidates(&self) -> u32 {
        match self.mode {
            SessionMode::Feedback => self.config.candidates_n,
            SessionMode::Direct => 1,
        }
    }

    /// Baseline means chained across rounds: starts at the round-0 baseline
    /// and scales by each adopted winner's within-round ratio.
    pub fn baseline_trajectory(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rounds.len() + 1);
        let Some(first) = self.rounds.first() else {
            return out;
        };
        let mut current = first.baseline_measurement.trimmed_mean_ns as f64;
        out.push(current);
        for round in &self.rounds {
            if round.adopted {
                if let (Some(w), b) = (
                    round.selected_candidate().and_then(|c| c.trimmed_mean_ns()),
                    round.baseline_measurement.trimmed_mean_ns,
                ) {
                    current *= w as f64 / b as f64;
                }
            }
            out.push(current);
        }
        out
    }
}
