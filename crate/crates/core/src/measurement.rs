//! Trimmed-mean timing, MEP time/data constraints and speedup.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MeasurementSet, MepConstraints, Nanos};
use crate::protocol::{parse_run_report, MepRunReport, ProtocolError};
use crate::toolchain::{self, ToolchainError, ToolchainProfile};

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("need more than 2k samples: R={samples}, k={k}")]
    InsufficientSamples { samples: usize, k: usize },
    #[error("times must be positive (got {baseline} ns / {optimized} ns)")]
    NonPositiveTime { baseline: Nanos, optimized: Nanos },
    #[error("{phase} run {run}: {source}")]
    Run {
        phase: RunPhase,
        run: u32,
        #[source]
        source: ToolchainError,
    },
    #[error("{phase} run {run}: {source}")]
    Protocol {
        phase: RunPhase,
        run: u32,
        #[source]
        source: ProtocolError,
        stdout: String,
    },
    #[error("{phase} run {run}: MEP did not print `MEP_STATUS OK`")]
    StatusNotOk {
        phase: RunPhase,
        run: u32,
        stdout: String,
        stderr: String,
    },
}

impl MeasurementError {
    /// 1-based index of the failing run, if the failure came from a run.
    pub fn run_index(&self) -> Option<(RunPhase, u32)> {
        match self {
            MeasurementError::Run { phase, run, .. }
            | MeasurementError::Protocol { phase, run, .. }
            | MeasurementError::StatusNotOk { phase, run, .. } => Some((*phase, *run)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Warmup,
    Measured,
}

impl std::fmt::Display for RunPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunPhase::Warmup => "warmup",
            RunPhase::Measured => "measured",
        })
    }
}

/// `num / den` rounded to nearest, ties to even.
pub fn div_round_half_even(num: u128, den: u128) -> u64 {
    assert!(den > 0, "division by zero");
    let q = num / den;
    let r = num % den;
    let twice = 2 * r;
    let q = if twice > den || (twice == den && q % 2 == 1) {
        q + 1
    } else {
        q
    };
    u64::try_from(q).unwrap_or(u64::MAX)
}

/// Sorts, drops the k lowest and k highest samples, and averages the rest.
pub fn trimmed_mean(samples: &[Nanos], k: usize) -> Result<Nanos, MeasurementError> {
    if samples.len() <= 2 * k {
        return Err(MeasurementError::InsufficientSamples {
            samples: samples.len(),
            k,
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let kept = &sorted[k..sorted.len() - k];
    let sum: u128 = kept.iter().map(|&s| u128::from(s)).sum();
    Ok(div_round_half_even(sum, kept.len() as u128))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum ConstraintViolation {
    /// `T_ker >= T_min` failed.
    KernelTooShort { t_ker_ns: Nanos, t_min_ns: Nanos },
    /// `T_overall <= T_max` failed.
    BudgetExceeded {
        t_overall_ns: Nanos,
        t_max_ns: Nanos,
    },
    /// `S_data <= S_max` failed.
    DataTooLarge { s_data_bytes: u64, s_max_bytes: u64 },
}

impl std::fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintViolation::KernelTooShort { t_ker_ns, t_min_ns } => {
                write!(f, "kernel time {t_ker_ns} ns < t_min {t_min_ns} ns")
            }
            ConstraintViolation::BudgetExceeded {
                t_overall_ns,
                t_max_ns,
            } => write!(f, "program time {t_overall_ns} ns > t_max {t_max_ns} ns"),
            ConstraintViolation::DataTooLarge {
                s_data_bytes,
                s_max_bytes,
            } => write!(f, "input data {s_data_bytes} B > s_max {s_max_bytes} B"),
        }
    }
}

/// Both time inequalities; every violated one is returned.
pub fn check_time_constraints(
    t_ker_ns: Nanos,
    t_overall_ns: Nanos,
    c: &MepConstraints,
) -> Result<(), Vec<ConstraintViolation>> {
    let mut violations = Vec::new();
    if t_ker_ns < c.t_min_ns {
        violations.push(ConstraintViolation::KernelTooShort {
            t_ker_ns,
            t_min_ns: c.t_min_ns,
        });
    }
    if t_overall_ns > c.t_max_ns {
        violations.push(ConstraintViolation::BudgetExceeded {
            t_overall_ns,
            t_max_ns: c.t_max_ns,
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataCheck {
    Pass,
    /// Passes, but zero input bytes usually means a broken generator.
    PassZeroBytes,
}

pub fn check_data_constraint(
    s_data_bytes: u64,
    c: &MepConstraints,
) -> Result<DataCheck, ConstraintViolation> {
    if s_data_bytes > c.s_max_bytes {
        return Err(ConstraintViolation::DataTooLarge {
            s_data_bytes,
            s_max_bytes: c.s_max_bytes,
        });
    }
    if s_data_bytes == 0 {
        warn!("MEP reports 0 input bytes; the input generator may be broken");
        return Ok(DataCheck::PassZeroBytes);
    }
    Ok(DataCheck::Pass)
}

/// `t_baseline / t_optimized`.
pub fn compute_speedup(t_baseline: Nanos, t_optimized: Nanos) -> Result<f64, MeasurementError> {
    if t_baseline == 0 || t_optimized == 0 {
        return Err(MeasurementError::NonPositiveTime {
            baseline: t_baseline,
            optimized: t_optimized,
        });
    }
    Ok(t_baseline as f64 / t_optimized as f64)
}

/// How many runs to perform and how to trim them.
#[derive(Debug, Clone, Copy)]
pub struct SamplingPlan {
    pub runs: u32,
    pub trim_k: u32,
    pub warmup_runs: u32,
}

/// Result of a sampling campaign.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub set: MeasurementSet,
    /// Longest whole-program wall time observed (T_overall).
    pub max_wall_ns: Nanos,
    /// Report of the last measured run.
    pub last_report: MepRunReport,
    /// Output tensor path of the last run, resolved against the run directory.
    pub output_file: Option<PathBuf>,
}

/// Runs the MEP `warmup_runs` times (discarded), then `runs` times, and
/// trims. The device lock is held for the whole campaign.
pub fn collect_samples(
    profile: &ToolchainProfile,
    exe: &Path,
    problem_size: u64,
    out_file: &Path,
    plan: SamplingPlan,
    log: Option<&Path>,
) -> Result<SampleRun, MeasurementError> {
    if (plan.runs as usize) <= 2 * plan.trim_k as usize {
        return Err(MeasurementError::InsufficientSamples {
            samples: plan.runs as usize,
            k: plan.trim_k as usize,
        });
    }
    let _device = toolchain::device_lock();
    let one = |phase: RunPhase, run: u32| -> Result<(MepRunReport, Nanos), MeasurementError> {
        let result = toolchain::execute_locked(profile, exe, problem_size, out_file, log)
            .map_err(|source| MeasurementError::Run { phase, run, source })?;
        let report =
            parse_run_report(&result.stdout).map_err(|source| MeasurementError::Protocol {
                phase,
                run,
                source,
                stdout: result.stdout.clone(),
            })?;
        if !report.status_ok {
            return Err(MeasurementError::StatusNotOk {
                phase,
                run,
                stdout: result.stdout,
                stderr: result.stderr,
            });
        }
        Ok((report, result.wall_time_ns))
    };
    for w in 1..=plan.warmup_runs {
        one(RunPhase::Warmup, w)?;
    }
    let mut samples = Vec::with_capacity(plan.runs as usize);
    let mut max_wall_ns = 0;
    let mut last_report = MepRunReport::default();
    for run in 1..=plan.runs {
        let (report, wall) = one(RunPhase::Measured, run)?;
        samples.push(
            report
                .mean_kernel_time_ns()
                .expect("status OK implies kernel times"),
        );
        max_wall_ns = max_wall_ns.max(wall);
        last_report = report;
    }
    let set = MeasurementSet::from_samples(samples, plan.trim_k, plan.warmup_runs)?;
    let output_file = last_report
        .output_file
        .as_ref()
        .map(|p| toolchain::exe_dir(exe).join(p));
    Ok(SampleRun {
        set,
        max_wall_ns,
        last_report,
        output_file,
    })
}
