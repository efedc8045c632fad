//! Session reports and the verifier that recomputes every reported number
//! from the persisted raw samples.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{
    CandidateStatus, MeasurementSet, PatternRecord, RoundRecord, Session, SessionMode,
    SessionStatus,
};
use crate::equivalence::{fe_check, Tolerance};
use crate::measurement::compute_speedup;
use crate::mep_builder::OUTPUT_FILE_NAME;
use crate::optimizer::{is_non_increasing, select_baseline, should_stop};
use crate::patterns::PatternStore;
use crate::session::{load_session, write_atomic, SessionError, SessionLayout};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Markdown => "md",
        }
    }
}

fn ms(ns: u64) -> String {
    format!("{:.3} ms", ns as f64 / 1e6)
}

fn mean_cell(m: Option<&MeasurementSet>) -> String {
    m.map(|m| format!("{} ns", m.trimmed_mean_ns))
        .unwrap_or_else(|| "-".into())
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Markdown => {
                let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
                out.push_str(&line(&self.header));
                out.push_str(&line(&vec!["---".to_string(); self.header.len()]));
                for r in &self.rows {
                    out.push_str(&line(r));
                }
            }
            ReportFormat::Text => {
                let mut widths: Vec<usize> =
                    self.header.iter().map(|h| h.chars().count()).collect();
                for r in &self.rows {
                    for (w, c) in widths.iter_mut().zip(r) {
                        *w = (*w).max(c.chars().count());
                    }
                }
                let line = |cells: &[String]| {
                    let padded: Vec<String> = cells
                        .iter()
                        .zip(&widths)
                        .map(|(c, w)| format!("{c:<w$}"))
                        .collect();
                    format!("{}\n", padded.join("  ").trim_end())
                };
                out.push_str(&line(&self.header));
                out.push_str(&line(
                    &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
                ));
                for r in &self.rows {
                    out.push_str(&line(r));
                }
            }
        }
        out
    }
}

fn heading(out: &mut String, format: ReportFormat, level: usize, text: &str) {
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "{} {text}\n", "#".repeat(level));
        }
        ReportFormat::Text => {
            let rule = if level == 1 { '=' } else { '-' };
            let _ = writeln!(
                out,
                "{text}\n{}\n",
                rule.to_string().repeat(text.chars().count())
            );
        }
    }
}

fn round_table(round: &RoundRecord, format: ReportFormat) -> String {
    let mut t = Table::new(&[
        "candidate",
        "status",
        "repairs",
        "trimmed mean",
        "speedup vs baseline",
    ]);
    for c in &round.candidates {
        let marker = if round.selected == Some(c.candidate_index) {
            " *"
        } else {
            ""
        };
        let speedup = c
            .trimmed_mean_ns()
            .and_then(|m| compute_speedup(round.baseline_measurement.trimmed_mean_ns, m).ok())
            .map(|s| format!("{s:.3}x"))
            .unwrap_or_else(|| "-".into());
        t.row(vec![
            format!("{}{marker}", c.candidate_index),
            c.status.as_str().to_string(),
            c.repair_count.to_string(),
            mean_cell(c.measurement.as_ref()),
            speedup,
        ]);
    }
    t.render(format)
}

/// Renders a session. `direct` is a sibling session run with `--direct`.
pub fn render_report(
    session: &Session,
    format: ReportFormat,
    direct: Option<&Session>,
    patterns: &[PatternRecord],
) -> String {
    let mut out = String::new();
    let partial = session.status != SessionStatus::Completed;
    let title = format!(
        "Optimization report: {}{}",
        session.kernel.name,
        if partial { " [PARTIAL]" } else { "" }
    );
    heading(&mut out, format, 1, &title);
    if partial {
        let _ = writeln!(
            out,
            "PARTIAL: the session has not completed; only the {} persisted round(s) are shown.\n",
            session.rounds.len()
        );
    }
    let c = &session.config;
    let mode = match session.mode {
        SessionMode::Feedback => "feedback loop",
        SessionMode::Direct => "direct (single generation, no feedback)",
    };
    let _ = writeln!(out, "Mode: {mode}");
    let _ = writeln!(out, "Dialect: {}", session.kernel.dialect);
    let _ = writeln!(
        out,
        "Parameters: D={} N={} R={} k={} epsilon={} tolerance rel={} abs={}",
        c.rounds_d,
        c.candidates_n,
        c.runs_r,
        c.trim_k,
        c.improvement_epsilon,
        c.fe_rel_tol,
        c.fe_abs_tol
    );
    let _ = writeln!(
        out,
        "MEP: problem size {}, input data {} bytes, limits t_min={} ns t_max={} ns s_max={} bytes",
        session.mep.problem_size,
        session.mep.reported_data_bytes,
        session.constraints.t_min_ns,
        session.constraints.t_max_ns,
        session.constraints.s_max_bytes
    );
    if let Some(m) = &session.initial_baseline_measurement {
        let _ = writeln!(
            out,
            "Initial baseline: {} ns ({})",
            m.trimmed_mean_ns,
            ms(m.trimmed_mean_ns)
        );
    }
    out.push('\n');

    heading(&mut out, format, 2, "Rounds");
    if session.rounds.is_empty() {
        out.push_str("No rounds were run.\n\n");
    }
    for r in &session.rounds {
        let outcome = match (r.selected, r.adopted) {
            (Some(n), true) => format!("candidate {n} selected and adopted"),
            (Some(n), false) => format!("candidate {n} selected, not faster than the baseline"),
            (None, _) => "no feasible candidate, baseline carried over".into(),
        };
        heading(
            &mut out,
            format,
            3,
            &format!(
                "Round {}: baseline {} ns, {outcome}",
                r.index, r.baseline_measurement.trimmed_mean_ns
            ),
        );
        out.push_str(&round_table(r, format));
        if let Some(stop) = &r.stop {
            let _ = writeln!(out, "\nStopped: {}", stop_text(stop));
        }
        out.push('\n');
    }

    heading(&mut out, format, 2, "Result");
    match (&session.final_speedup, &session.closing) {
        (Some(s), Some(cl)) => {
            let _ = writeln!(out, "Final standalone speedup: {s}");
            let _ = writeln!(
                out,
                "Closing re-measurement: original {} ns, final {} ns",
                cl.initial.trimmed_mean_ns, cl.final_baseline.trimmed_mean_ns
            );
            let _ = writeln!(
                out,
                "Final output matches the original kernel output: {}",
                if cl.final_matches_initial {
                    "yes"
                } else {
                    "NO"
                }
            );
        }
        _ => {
            let _ = writeln!(out, "Final standalone speedup: not yet measured");
        }
    }
    if let Some(direct) = direct {
        match direct.final_speedup {
            Some(s) => {
                let _ = writeln!(out, "Direct single-generation speedup: {s}");
            }
            None => {
                let _ = writeln!(out, "Direct single-generation speedup: not yet measured");
            }
        }
    }
    if !partial {
        let winner = SessionLayout::new(&session.session_dir).winner_dir();
        let _ = writeln!(
            out,
            "Integration export: {}",
            winner.join("kernel.src").display()
        );
    }
    out.push('\n');

    heading(&mut out, format, 2, "Patterns");
    if patterns.is_empty() {
        out.push_str("No patterns recorded.\n");
    } else {
        let mut t = Table::new(&["category", "best speedup", "evidence", "description"]);
        for p in patterns {
            t.row(vec![
                p.category.as_str().to_string(),
                format!("{:.3}x", p.max_speedup()),
                p.evidence.len().to_string(),
                p.description.clone(),
            ]);
        }
        out.push_str(&t.render(format));
    }
    out
}

fn stop_text(stop: &crate::domain::StopReason) -> String {
    use crate::domain::StopReason::*;
    match stop {
        RoundCap => "round cap reached".into(),
        CarriedOver => "feasible set was empty".into(),
        BelowThreshold { improvement } => {
            format!("improvement {improvement:.4} below the threshold")
        }
    }
}

/// Loads the session (and optional direct sibling), renders the report and
/// writes it as `report.<ext>` in the session directory.
pub fn write_report(
    dir: &Path,
    format: ReportFormat,
    direct_dir: Option<&Path>,
) -> Result<String, ReportError> {
    let session = load_session(dir)?;
    let direct = direct_dir.map(load_session).transpose()?;
    let layout = SessionLayout::new(dir);
    let patterns = PatternStore::load(&layout.patterns_json())
        .map(|s| s.patterns)
        .map_err(|e| SessionError::CorruptSession {
            path: layout.patterns_json(),
            message: e.to_string(),
        })?;
    let text = render_report(&session, format, direct.as_ref(), &patterns);
    let path = layout.report_path(format.extension());
    write_atomic(&path, text.as_bytes()).map_err(|source| ReportError::Io { path, source })?;
    Ok(text)
}

/// One verifier finding.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn check(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }

    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.ok).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {}{}",
                if c.ok { "ok  " } else { "FAIL" },
                c.name,
                if c.detail.is_empty() {
                    String::new()
                } else {
                    format!(": {}", c.detail)
                }
            );
        }
        out
    }
}

fn check_set(report: &mut VerifyReport, name: &str, m: &MeasurementSet, runs: Option<u32>) {
    report.check(
        format!("{name}: trimmed mean recomputed"),
        m.is_consistent(),
        format!("stored {} ns", m.trimmed_mean_ns),
    );
    if let Some(r) = runs {
        report.check(
            format!("{name}: sample count"),
            m.samples_ns.len() == r as usize,
            format!("{} samples, R={r}", m.samples_ns.len()),
        );
    }
}

/// Recomputes trimmed means, selections, stop decisions and the final
/// speedup from the persisted files and compares them with what is stored.
pub fn verify_session(session: &Session) -> VerifyReport {
    let mut report = VerifyReport::default();
    let cfg = &session.config;
    let runs = Some(cfg.runs_r);
    if let Some(m) = &session.initial_baseline_measurement {
        check_set(&mut report, "initial baseline", m, runs);
    }
    let layout = SessionLayout::new(&session.session_dir);
    let tol = Tolerance {
        rel: cfg.fe_rel_tol,
        abs: cfg.fe_abs_tol,
    };
    report.check(
        "round count within cap",
        session.rounds.len() as u32 <= session.effective_rounds(),
        format!(
            "{} rounds, cap {}",
            session.rounds.len(),
            session.effective_rounds()
        ),
    );
    for (i, r) in session.rounds.iter().enumerate() {
        let name = format!("round {}", r.index);
        report.check(format!("{name}: index contiguous"), r.index == i as u32, "");
        check_set(
            &mut report,
            &format!("{name} baseline"),
            &r.baseline_measurement,
            runs,
        );
        report.check(
            format!("{name}: candidate count within N"),
            r.candidates.len() as u32 <= session.effective_candidates(),
            format!("{} candidates", r.candidates.len()),
        );
        for c in &r.candidates {
            let cname = format!("{name} candidate {}", c.candidate_index);
            if let Some(m) = &c.measurement {
                check_set(&mut report, &cname, m, runs);
            }
            report.check(
                format!("{cname}: repairs within cap"),
                c.repair_count <= cfg.repair_attempts_max,
                format!("{} repairs", c.repair_count),
            );
            if c.status == CandidateStatus::Feasible {
                report.check(
                    format!("{cname}: feasible has a measurement"),
                    c.measurement.is_some(),
                    "",
                );
            }
        }
        let expected = select_baseline(&r.candidates);
        report.check(
            format!("{name}: selection is the feasible argmin"),
            expected == r.selected,
            format!("stored {:?}, recomputed {:?}", r.selected, expected),
        );
        report.check(
            format!("{name}: carried_over iff no feasible candidate"),
            r.carried_over == expected.is_none(),
            "",
        );
        let adopted = r
            .selected_candidate()
            .and_then(|c| c.trimmed_mean_ns())
            .is_some_and(|m| m < r.baseline_measurement.trimmed_mean_ns);
        report.check(format!("{name}: adoption rule"), adopted == r.adopted, "");
        let stop = should_stop(cfg, session.effective_rounds(), r.index, r);
        report.check(
            format!("{name}: stop decision"),
            stop == r.stop,
            format!("stored {:?}, recomputed {:?}", r.stop, stop),
        );
        if let Some(c) = r.selected_candidate() {
            let base_out = layout.round_baseline_dir(r.index).join(OUTPUT_FILE_NAME);
            let cand_out = layout
                .candidate_dir(r.index, c.candidate_index)
                .join(format!("build_{}", c.repair_count))
                .join(OUTPUT_FILE_NAME);
            if base_out.exists() && cand_out.exists() {
                let fe = fe_check(&base_out, Some(&cand_out), tol);
                report.check(
                    format!("{name}: selected output matches its baseline"),
                    fe.equivalent,
                    fe.diagnostics(),
                );
            }
        }
    }
    let trajectory = session.baseline_trajectory();
    report.check(
        "baseline trajectory non-increasing",
        is_non_increasing(&trajectory),
        format!("{trajectory:?}"),
    );
    if let Some(cl) = &session.closing {
        check_set(&mut report, "closing original", &cl.initial, runs);
        check_set(&mut report, "closing final", &cl.final_baseline, runs);
        let recomputed = compute_speedup(
            cl.initial.trimmed_mean_ns,
            cl.final_baseline.trimmed_mean_ns,
        )
        .ok();
        report.check(
            "final speedup recomputed",
            recomputed.is_some() && recomputed == session.final_speedup,
            format!(
                "stored {:?}, recomputed {:?}",
                session.final_speedup, recomputed
            ),
        );
        report.check(
            "final kernel is the last adopted baseline",
            cl.final_source_hash == session.current_baseline().digest(),
            "",
        );
    } else if session.status == SessionStatus::Completed {
        report.check("completed session has a closing measurement", false, "");
    }
    report
}

/// Loads and verifies a session directory.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport, ReportError> {
    Ok(verify_session(&load_session(dir)?))
}
