mod common;

use std::fs;
use std::path::Path;

use common::{Output, Run, Scripts, Timing, Variant};
use mepopt_core::llm::{read_call_log, Stage};
use mepopt_core::patterns::PatternStore;
use mepopt_core::report::verify_session;
use mepopt_core::session::{load_session, SessionLayout};
use mepopt_core::{CandidateStatus, PatternCategory, RunOutcome, SessionMode, StopReason};

fn run_in(tmp: &Path, rounds: u32, n: u32) -> Run {
    Run {
        session_dir: tmp.join("session"),
        mock_dir: tmp.join("mock"),
        config: common::config(rounds, n, 5, 1),
        constraints: common::constraints(2_000_000),
        mode: SessionMode::Feedback,
        patterns_path: Some(tmp.join("patterns.json")),
    }
}

fn complete(run: &Run, base: &Variant) -> mepopt_core::Session {
    let mut session = run.start(base).unwrap();
    assert_eq!(
        run.drive(&mut session, None).unwrap(),
        RunOutcome::Completed
    );
    session
}

fn round_jsons(dir: &Path) -> Vec<Vec<u8>> {
    let layout = SessionLayout::new(dir);
    (0..)
        .map(|d| layout.round_json(d))
        .take_while(|p| p.exists())
        .map(|p| fs::read(p).unwrap())
        .collect()
}

#[test]
fn infeasible_rounds_carry_the_baseline_over_and_stop() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Variant::busy(390);
    Scripts::new(&tmp.path().join("mock"))
        .mep(&base, Timing::Synthetic, 8)
        .candidate(0, 1, &Variant::output(100, Output::DoubledElement))
        .repair(0, 1, &Variant::output(100, Output::DoubledElement));
    let run = run_in(tmp.path(), 3, 1);
    let session = complete(&run, &base);
    let round = &session.rounds[0];
    assert!(round.carried_over);
    assert_eq!(round.selected, None);
    assert!(!round.adopted);
    assert_eq!(round.stop, Some(StopReason::CarriedOver));
    assert_eq!(session.final_speedup, Some(1.0));
    assert!(verify_session(&session).ok());
}

#[test]
fn candidates_repeating_the_baseline_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Variant::busy(390);
    Scripts::new(&tmp.path().join("mock"))
        .mep(&base, Timing::Synthetic, 8)
        .candidate(0, 1, &base)
        .candidate(0, 2, &Variant::busy(300))
        .candidate(0, 3, &Variant::busy(300));
    let mut run = run_in(tmp.path(), 1, 3);
    run.config.pattern_inject_max = 0;
    let session = complete(&run, &base);
    let statuses: Vec<_> = session.rounds[0]
        .candidates
        .iter()
        .map(|c| c.status)
        .collect();
    assert_eq!(
        statuses,
        vec![
            CandidateStatus::SkippedDuplicate,
            CandidateStatus::Feasible,
            CandidateStatus::SkippedDuplicate
        ]
    );
    assert_eq!(session.rounds[0].selected, Some(2));
    // Skipped candidates are neither built nor measured.
    let layout = SessionLayout::new(&run.session_dir);
    assert!(!layout
        .candidate_dir(0, 1)
        .join("measurements.json")
        .exists());
}

#[test]
fn crashing_candidates_fail_at_runtime_after_their_repairs() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Variant::busy(390);
    Scripts::new(&tmp.path().join("mock"))
        .mep(&base, Timing::Synthetic, 8)
        .candidate(0, 1, &Variant::Crash)
        .repair(0, 1, &Variant::Crash);
    let run = run_in(tmp.path(), 1, 1);
    let session = complete(&run, &base);
    let c = &session.rounds[0].candidates[0];
    assert_eq!(c.status, CandidateStatus::RunFailed);
    assert_eq!(c.repair_count, run.config.repair_attempts_max);
    assert!(c.diagnostics.contains("crash"), "{}", c.diagnostics);
}

#[test]
fn identical_sessions_produce_identical_round_records() {
    let base = Variant::busy(390);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        Scripts::new(&tmp.path().join("mock"))
            .mep(&base, Timing::Synthetic, 8)
            .candidate(0, 1, &Variant::busy(300))
            .candidate(0, 2, &Variant::CompileError { tag: "a" })
            .repair(0, 2, &Variant::busy(250))
            .candidate(1, 1, &Variant::busy(250))
            .candidate(1, 2, &Variant::busy(240))
            .summary(0, 2, "p")
            .summary(1, 2, "q");
        let run = run_in(tmp.path(), 2, 2);
        complete(&run, &base);
        outputs.push(round_jsons(&run.session_dir));
    }
    assert_eq!(outputs[0].len(), 2);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn zero_injection_behaves_like_no_pattern_store() {
    let base = Variant::busy(390);
    let scripted = |tmp: &Path| {
        Scripts::new(&tmp.join("mock"))
            .mep(&base, Timing::Synthetic, 8)
            .candidate(0, 1, &Variant::busy(300))
            .candidate(1, 1, &Variant::busy(250))
            .summary(0, 1, "never requested");
    };

    let with_store = tempfile::tempdir().unwrap();
    scripted(with_store.path());
    let mut a = run_in(with_store.path(), 2, 1);
    a.config.pattern_inject_max = 0;
    let mut store = PatternStore::default();
    store
        .record(
            PatternCategory::Tiling,
            "stored",
            "STORED-HINT",
            "other",
            0,
            3.0,
            0.01,
        )
        .unwrap();
    store.save(a.patterns_path.as_ref().unwrap()).unwrap();
    complete(&a, &base);

    let without = tempfile::tempdir().unwrap();
    scripted(without.path());
    let mut b = run_in(without.path(), 2, 1);
    b.config.pattern_inject_max = 0;
    b.patterns_path = None;
    complete(&b, &base);

    assert_eq!(round_jsons(&a.session_dir), round_jsons(&b.session_dir));
    let prompt = |run: &Run, d| {
        fs::read_to_string(
            SessionLayout::new(&run.session_dir)
                .candidate_dir(d, 1)
                .join("prompt.md"),
        )
        .unwrap()
    };
    for d in 0..2 {
        assert_eq!(prompt(&a, d), prompt(&b, d));
        assert!(!prompt(&a, d).contains("STORED-HINT"));
    }
    let summarize = |run: &Run| {
        read_call_log(&run.calls_log())
            .unwrap()
            .iter()
            .filter(|c| c.stage == Stage::SummarizePatterns)
            .count()
    };
    assert_eq!(summarize(&a), 0);
    assert_eq!(summarize(&b), 0);
}

#[test]
fn adopted_rounds_feed_the_pattern_store_and_later_prompts() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Variant::busy(390);
    Scripts::new(&tmp.path().join("mock"))
        .mep(&base, Timing::Synthetic, 8)
        .candidate(0, 1, &Variant::busy(300))
        .candidate(1, 1, &Variant::busy(250))
        .summary(0, 1, "UNIQUE-PATTERN-TEXT")
        .summary(1, 1, "second pattern");
    let run = run_in(tmp.path(), 2, 1);
    complete(&run, &base);
    let store = PatternStore::load(run.patterns_path.as_ref().unwrap()).unwrap();
    assert_eq!(store.len(), 2);
    let layout = SessionLayout::new(&run.session_dir);
    let prompt0 = fs::read_to_string(layout.candidate_dir(0, 1).join("prompt.md")).unwrap();
    let prompt1 = fs::read_to_string(layout.candidate_dir(1, 1).join("prompt.md")).unwrap();
    assert!(!prompt0.contains("UNIQUE-PATTERN-TEXT"));
    assert!(prompt1.contains("UNIQUE-PATTERN-TEXT"));
    assert!(layout.patterns_json().is_file());
}

#[test]
fn closing_exports_the_winner_and_checks_it_against_the_original() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Variant::busy(390);
    Scripts::new(&tmp.path().join("mock"))
        .mep(&base, Timing::Synthetic, 8)
        .candidate(0, 1, &Variant::busy(195))
        .summary(0, 1, "halve the work");
    let run = run_in(tmp.path(), 1, 1);
    let session = complete(&run, &base);
    assert_eq!(session.final_speedup, Some(2.0));
    let closing = session.closing.as_ref().unwrap();
    assert!(closing.final_matches_initial);
    let layout = SessionLayout::new(&run.session_dir);
    let winner = fs::read_to_string(layout.winner_dir().join("kernel.src")).unwrap();
    assert!(winner.contains("#define COST 195L"));
    assert!(layout.winner_dir().join("INTEGRATION.md").is_file());

    let reloaded = load_session(&run.session_dir).unwrap();
    assert_eq!(reloaded.final_speedup, session.final_speedup);
    assert_eq!(reloaded.rounds, session.rounds);
}

#[test]
fn tampered_samples_fail_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Variant::busy(390);
    Scripts::new(&tmp.path().join("mock"))
        .mep(&base, Timing::Synthetic, 8)
        .candidate(0, 1, &Variant::busy(300))
        .summary(0, 1, "p");
    let run = run_in(tmp.path(), 1, 1);
    complete(&run, &base);
    let path = SessionLayout::new(&run.session_dir).round_json(0);
    let mut round: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    // Lower every retained sample so the stored trimmed mean no longer follows from them.
    let samples = round["candidates"][0]["measurement"]["samples_ns"]
        .as_array_mut()
        .unwrap();
    assert_eq!(samples[0], 2_457_600);
    for s in samples.iter_mut() {
        *s = 2_000_000.into();
    }
    fs::write(&path, serde_json::to_vec_pretty(&round).unwrap()).unwrap();
    let session = load_session(&run.session_dir).unwrap();
    let report = verify_session(&session);
    assert!(!report.ok());
}
