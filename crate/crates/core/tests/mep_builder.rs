mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{Scripts, Timing, Variant};
use mepopt_core::llm::prompt::PromptSet;
use mepopt_core::llm::{read_call_log, MockBackend, RecordingBackend, Stage};
use mepopt_core::measurement::{
    check_data_constraint, check_time_constraints, collect_samples, SamplingPlan,
};
use mepopt_core::mep_builder::{
    adopt_existing_mep, build_mep, BuildContext, MepBuildError, OUTPUT_FILE_NAME,
};
use mepopt_core::{MepConstraints, MepProgram, OptimizerConfig};

struct Fixture {
    _tmp: tempfile::TempDir,
    scripts: Scripts,
    session: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let scripts = Scripts::new(&tmp.path().join("mock"));
    let session = tmp.path().join("session");
    fs::create_dir_all(&session).unwrap();
    Fixture {
        _tmp: tmp,
        scripts,
        session,
    }
}

fn put(scripts: &Scripts, stage: &str, file: &str, body: &str) {
    let dir = scripts.dir.join(stage);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(file), common::fenced("c mep.c", body)).unwrap();
}

fn good_mep() -> String {
    common::mep_source(
        &common::kernel_region(&Variant::busy(390)),
        Timing::Synthetic,
        8,
    )
}

fn build(
    f: &Fixture,
    config: &OptimizerConfig,
    constraints: &MepConstraints,
) -> Result<MepProgram, MepBuildError> {
    let mock = MockBackend::new(&f.scripts.dir);
    let backend = RecordingBackend::new(&mock, Some(&f.session.join("llm_calls.jsonl")));
    let profile = common::profile();
    let prompts = PromptSet::default();
    let ctx = BuildContext {
        constraints,
        config,
        backend: &backend,
        profile: &profile,
        prompts: &prompts,
        session_dir: &f.session,
    };
    build_mep(&common::kernel_source(&Variant::busy(390)), &ctx)
}

#[test]
fn built_mep_satisfies_all_constraints_on_a_fresh_run() {
    let f = fixture();
    put(&f.scripts, "build_mep", "r0_c0.md", &good_mep());
    let constraints = common::constraints(2_000_000);
    let config = common::config(1, 1, 5, 1);
    let mep = build(&f, &config, &constraints).unwrap();
    // 390 ns per element from a seed of 1024: 1024 -> 2048 -> 4096 -> 8192.
    assert_eq!(mep.problem_size, 8192);
    assert_eq!(mep.reported_data_bytes, 8192 * 8);
    assert_eq!(mep.repair_count, 0);
    assert_eq!(mep.build_artifacts_dir, Path::new("mep/attempt_0"));
    mep.validate("work", Some(&constraints)).unwrap();

    let exe = f.session.join(&mep.build_artifacts_dir).join("mep");
    let plan = SamplingPlan {
        runs: 3,
        trim_k: 1,
        warmup_runs: 0,
    };
    let run = collect_samples(
        &common::profile(),
        &exe,
        mep.problem_size,
        Path::new(OUTPUT_FILE_NAME),
        plan,
        None,
    )
    .unwrap();
    check_time_constraints(run.set.trimmed_mean_ns, run.max_wall_ns, &constraints).unwrap();
    check_data_constraint(run.last_report.data_bytes.unwrap(), &constraints).unwrap();
    assert!(f.session.join("mep/prompt.md").is_file());
    assert!(f.session.join("mep/response.md").is_file());
}

#[test]
fn compile_and_protocol_failures_are_repaired() {
    let f = fixture();
    let broken = good_mep().replace("int main(int argc", "int main(int argc +");
    put(&f.scripts, "build_mep", "r0_c0.md", &broken);
    let silent = good_mep().replace("printf(\"MEP_STATUS OK\\n\");", "");
    put(&f.scripts, "repair", "r0_c0_a1.md", &silent);
    put(&f.scripts, "repair", "r0_c0_a2.md", &good_mep());
    let config = common::config(1, 1, 5, 1);
    let mep = build(&f, &config, &common::constraints(2_000_000)).unwrap();
    assert_eq!(mep.repair_count, 2);
    assert_eq!(mep.build_artifacts_dir, Path::new("mep/attempt_2"));
    let calls = read_call_log(&f.session.join("llm_calls.jsonl")).unwrap();
    let stages: Vec<_> = calls.iter().map(|c| (c.stage, c.attempt)).collect();
    assert_eq!(
        stages,
        vec![(Stage::BuildMep, 0), (Stage::Repair, 1), (Stage::Repair, 2)]
    );
    let repair1 = fs::read_to_string(f.session.join("mep/repair_1.md")).unwrap();
    assert!(repair1.contains("compile"), "{repair1}");
    let repair2 = fs::read_to_string(f.session.join("mep/repair_2.md")).unwrap();
    assert!(repair2.contains("MEP_STATUS"), "{repair2}");
}

#[test]
fn missing_markers_exhaust_the_repair_budget() {
    let f = fixture();
    let unmarked = good_mep()
        .replace("/* MEP_KERNEL_BEGIN */", "")
        .replace("/* MEP_KERNEL_END */", "");
    put(&f.scripts, "build_mep", "r0_c0.md", &unmarked);
    put(&f.scripts, "repair", "r0_c0.md", &unmarked);
    let config = common::config(1, 1, 5, 1);
    match build(&f, &config, &common::constraints(2_000_000)) {
        Err(MepBuildError::MepConstructionFailed { repairs, .. }) => {
            assert_eq!(repairs, config.repair_attempts_max)
        }
        other => panic!("{other:?}"),
    }
    let calls = read_call_log(&f.session.join("llm_calls.jsonl")).unwrap();
    assert_eq!(calls.len() as u32, 1 + config.repair_attempts_max);
}

#[test]
fn data_cap_below_t_min_is_infeasible() {
    let f = fixture();
    put(&f.scripts, "build_mep", "r0_c0.md", &good_mep());
    let config = common::config(1, 1, 5, 1);
    // t_min can only be met at sizes whose input exceeds the 16 KiB data cap.
    let constraints = MepConstraints {
        t_min_ns: 2_000_000,
        t_max_ns: 10_000_000_000,
        s_max_bytes: 16 << 10,
    };
    match build(&f, &config, &constraints) {
        Err(MepBuildError::ConstraintsInfeasible { s_data_bytes, .. }) => {
            assert!(s_data_bytes > 16 << 10)
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn existing_mep_directory_is_adopted_with_a_fixed_size() {
    let f = fixture();
    let existing = f.session.parent().unwrap().join("existing");
    fs::create_dir_all(&existing).unwrap();
    fs::write(existing.join("mep.c"), good_mep()).unwrap();
    let mock = MockBackend::new(&f.scripts.dir);
    let profile = common::profile();
    let prompts = PromptSet::default();
    let constraints = common::constraints(2_000_000);
    let config = common::config(1, 1, 5, 1);
    let ctx = BuildContext {
        constraints: &constraints,
        config: &config,
        backend: &mock,
        profile: &profile,
        prompts: &prompts,
        session_dir: &f.session,
    };
    let kernel = common::kernel_source(&Variant::busy(390));
    let mep = adopt_existing_mep(&kernel, &existing, Some(10_000), &ctx).unwrap();
    assert_eq!(mep.problem_size, 10_000);
    assert!(mock.calls().is_empty());

    // A fixed size that misses t_min is rejected rather than searched.
    assert!(matches!(
        adopt_existing_mep(&kernel, &existing, Some(100), &ctx),
        Err(MepBuildError::ConstraintsInfeasible { .. })
    ));
}
