//! C fixtures and session drivers shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use mepopt_core::llm::prompt::PromptSet;
use mepopt_core::llm::{MockBackend, RecordingBackend};
use mepopt_core::mep_builder::{build_mep, BuildContext, MepBuildError};
use mepopt_core::optimizer::{Engine, OptimizeError};
use mepopt_core::session::save_session;
use mepopt_core::toolchain::ToolchainProfile;
use mepopt_core::{
    run_session, Dialect, KernelSource, MepConstraints, OptimizerConfig, RunOutcome, Session,
    SessionMode,
};

pub const ENTRY: &str = "work";

/// How the fixture MEP reports kernel time.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    /// Wall clock, best of five back-to-back launches.
    Real,
    /// `n * COST` nanoseconds, independent of the machine.
    Synthetic,
}

/// Output written by a kernel variant.
#[derive(Clone, Copy)]
pub enum Output {
    Exact,
    /// `y[0]` doubled.
    DoubledElement,
    /// Every element scaled by `1 + 1e-9`.
    Perturbed,
    /// Half the expected number of elements.
    ShortShape,
}

/// Kernel variants handed out by the mock backend.
#[derive(Clone)]
pub enum Variant {
    /// Busy loop of `cost` iterations per element. `tag` only changes the text.
    Busy {
        cost: u64,
        output: Output,
        tag: &'static str,
    },
    /// References an undeclared identifier. `tag` only changes the text.
    CompileError { tag: &'static str },
    /// Dies with SIGSEGV.
    Crash,
    /// Sleeps for the given number of milliseconds before returning.
    Sleep { ms: u64 },
}

impl Variant {
    pub fn busy(cost: u64) -> Variant {
        Variant::Busy {
            cost,
            output: Output::Exact,
            tag: "",
        }
    }

    pub fn tagged(cost: u64, tag: &'static str) -> Variant {
        Variant::Busy {
            cost,
            output: Output::Exact,
            tag,
        }
    }

    pub fn output(cost: u64, output: Output) -> Variant {
        Variant::Busy {
            cost,
            output,
            tag: "",
        }
    }
}

/// Text of the kernel region for a variant.
pub fn kernel_region(v: &Variant) -> String {
    match v {
        Variant::Busy { cost, output, tag } => {
            let store = match output {
                Output::Perturbed => "y[i] = 2.0 * x[i] * (1.0 + 1e-9);",
                _ => "y[i] = 2.0 * x[i];",
            };
            let after = match output {
                Output::DoubledElement => "    y[0] *= 2.0;\n",
                _ => "",
            };
            let ret = match output {
                Output::ShortShape => "n / 2",
                _ => "n",
            };
            let comment = if tag.is_empty() {
                String::new()
            } else {
                format!("/* {tag} */\n")
            };
            format!(
                "{comment}#define COST {cost}L\n\
                 long work(const double *x, double *y, long n)\n{{\n\
                 \x20   for (long i = 0; i < n; i++)\n\
                 \x20       {store}\n\
                 {after}\
                 \x20   spin(n * COST);\n\
                 \x20   return {ret};\n}}\n"
            )
        }
        Variant::CompileError { tag } => format!(
            "/* {tag} */\n#define COST 1L\n\
             long work(const double *x, double *y, long n)\n{{\n\
             \x20   for (long i = 0; i < n; i++)\n\
             \x20       y[i] = 2.0 * x[i] + undeclared_offset;\n\
             \x20   return n;\n}}\n"
        ),
        Variant::Crash => "#define COST 1L\n\
             long work(const double *x, double *y, long n)\n{\n\
             \x20   (void)x; (void)y;\n\
             \x20   raise(SIGSEGV);\n\
             \x20   return n;\n}\n"
            .to_string(),
        Variant::Sleep { ms } => format!(
            "#define COST 1L\n\
             long work(const double *x, double *y, long n)\n{{\n\
             \x20   for (long i = 0; i < n; i++)\n\
             \x20       y[i] = 2.0 * x[i];\n\
             \x20   struct timespec ts = {{ {} , {}L }};\n\
             \x20   nanosleep(&ts, NULL);\n\
             \x20   return n;\n}}\n",
            ms / 1000,
            (ms % 1000) * 1_000_000
        ),
    }
}

/// Full MEP source around `region`. Inputs are `0.5 + U[0, 1)` from a fixed
/// LCG; the output is a 1-D f64 tensor of the length `work` returns.
pub fn mep_source(region: &str, timing: Timing, bytes_per_elem: u64) -> String {
    let launches = match timing {
        Timing::Real => 5,
        Timing::Synthetic => 1,
    };
    let time_expr = match timing {
        Timing::Real => "best",
        Timing::Synthetic => "(uint64_t)n * (uint64_t)COST",
    };
    format!(
        r#"#define _POSIX_C_SOURCE 199309L
#include <signal.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>

static void spin(long iters)
{{
    volatile unsigned long s = 0;
    for (long i = 0; i < iters; i++)
        s += (unsigned long)i;
}}

/* MEP_KERNEL_BEGIN */
{region}/* MEP_KERNEL_END */

static uint64_t rng_state = 0x5EEDULL;

static double next_uniform(void)
{{
    rng_state = rng_state * 6364136223846793005ULL + 1442695040888963407ULL;
    return (double)(rng_state >> 11) / 9007199254740992.0;
}}

static uint64_t now_ns(void)
{{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000ULL + (uint64_t)ts.tv_nsec;
}}

static void put_le(FILE *f, uint64_t v, int bytes)
{{
    for (int i = 0; i < bytes; i++)
        fputc((int)((v >> (8 * i)) & 0xff), f);
}}

int main(int argc, char **argv)
{{
    if (argc < 3)
        return 2;
    long n = strtol(argv[1], NULL, 10);
    if (n <= 0)
        return 2;
    double *x = malloc((size_t)n * sizeof *x);
    double *y = calloc((size_t)n, sizeof *y);
    if (!x || !y)
        return 1;
    for (long i = 0; i < n; i++)
        x[i] = 0.5 + next_uniform();
    long len = 0;
    uint64_t best = UINT64_MAX;
    for (int launch = 0; launch < {launches}; launch++) {{
        uint64_t t0 = now_ns();
        len = work(x, y, n);
        uint64_t t = now_ns() - t0;
        if (t < best)
            best = t;
    }}
    uint64_t dt = {time_expr};
    (void)best;
    printf("MEP_KERNEL_TIME_NS %llu\n", (unsigned long long)(dt ? dt : 1));
    printf("MEP_DATA_BYTES %llu\n", (unsigned long long)n * {bytes_per_elem}ULL);
    FILE *f = fopen(argv[2], "wb");
    if (!f)
        return 1;
    fwrite("MEPO", 1, 4, f);
    fputc(1, f);
    fputc(1, f);
    put_le(f, 1, 4);
    put_le(f, (uint64_t)len, 8);
    for (long i = 0; i < len; i++) {{
        uint64_t bits;
        memcpy(&bits, &y[i], sizeof bits);
        put_le(f, bits, 8);
    }}
    fclose(f);
    printf("MEP_OUTPUT_FILE %s\n", argv[2]);
    printf("MEP_STATUS OK\n");
    return 0;
}}
"#
    )
}

pub fn fenced(lang_and_name: &str, body: &str) -> String {
    format!("Scripted response.\n\n```{lang_and_name}\n{body}```\n")
}

/// Mock script directory under construction.
pub struct Scripts {
    pub dir: PathBuf,
}

impl Scripts {
    pub fn new(dir: &Path) -> Scripts {
        fs::create_dir_all(dir).unwrap();
        Scripts {
            dir: dir.to_path_buf(),
        }
    }

    fn put(&self, stage: &str, file: &str, text: &str) {
        let d = self.dir.join(stage);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join(file), text).unwrap();
    }

    /// MEP answer to the build request.
    pub fn mep(&self, baseline: &Variant, timing: Timing, bytes_per_elem: u64) -> &Self {
        let src = mep_source(&kernel_region(baseline), timing, bytes_per_elem);
        self.put("build_mep", "r0_c0.md", &fenced("c mep.c", &src));
        self
    }

    pub fn candidate(&self, round: u32, index: u32, v: &Variant) -> &Self {
        self.put(
            "generate_candidates",
            &format!("r{round}_c{index}.md"),
            &fenced("c", &kernel_region(v)),
        );
        self
    }

    /// Answer to every repair of `(round, index)` without a more specific script.
    pub fn repair(&self, round: u32, index: u32, v: &Variant) -> &Self {
        self.put(
            "repair",
            &format!("r{round}_c{index}.md"),
            &fenced("c", &kernel_region(v)),
        );
        self
    }

    pub fn summary(&self, round: u32, index: u32, description: &str) -> &Self {
        let body = format!(
            "[{{\"category\": \"other\", \"description\": \"{description}\", \"hint\": \"{description}\"}}]\n"
        );
        self.put(
            "summarize_patterns",
            &format!("r{round}_c{index}.md"),
            &fenced("json", &body),
        );
        self
    }
}

pub fn kernel_source(baseline: &Variant) -> KernelSource {
    KernelSource::new("work", kernel_region(baseline), Dialect::CToy, ENTRY).unwrap()
}

pub fn constraints(t_min_ns: u64) -> MepConstraints {
    MepConstraints {
        t_min_ns,
        t_max_ns: 10_000_000_000,
        s_max_bytes: 256 << 20,
    }
}

pub fn config(rounds: u32, candidates: u32, runs: u32, trim: u32) -> OptimizerConfig {
    OptimizerConfig {
        rounds_d: rounds,
        candidates_n: candidates,
        runs_r: runs,
        trim_k: trim,
        warmup_runs: 1,
        repair_attempts_max: 2,
        ..OptimizerConfig::small_kernel()
    }
}

pub fn profile() -> ToolchainProfile {
    ToolchainProfile::default_for(Dialect::CToy)
}

/// Everything needed to drive one session against mock scripts.
pub struct Run {
    pub session_dir: PathBuf,
    pub mock_dir: PathBuf,
    pub config: OptimizerConfig,
    pub constraints: MepConstraints,
    pub mode: SessionMode,
    pub patterns_path: Option<PathBuf>,
}

impl Run {
    pub fn calls_log(&self) -> PathBuf {
        self.session_dir.join("llm_calls.jsonl")
    }

    /// Builds the MEP from the scripts and creates session.json.
    pub fn start(&self, baseline: &Variant) -> Result<Session, MepBuildError> {
        fs::create_dir_all(&self.session_dir).unwrap();
        let mock = MockBackend::new(&self.mock_dir);
        let backend = RecordingBackend::new(&mock, Some(&self.calls_log()));
        let profile = profile();
        let prompts = PromptSet::default();
        let ctx = BuildContext {
            constraints: &self.constraints,
            config: &self.config,
            backend: &backend,
            profile: &profile,
            prompts: &prompts,
            session_dir: &self.session_dir,
        };
        let kernel = kernel_source(baseline);
        let mep = build_mep(&kernel, &ctx)?;
        let session = Session::new(
            self.session_dir.clone(),
            self.mode,
            kernel,
            mep,
            self.config.clone(),
            self.constraints,
        )
        .unwrap();
        save_session(&session).unwrap();
        Ok(session)
    }

    /// Runs (or continues) the loop.
    pub fn drive(
        &self,
        session: &mut Session,
        halt: Option<u32>,
    ) -> Result<RunOutcome, OptimizeError> {
        let mock = MockBackend::new(&self.mock_dir);
        let previous = mepopt_core::llm::read_call_log(&self.calls_log())
            .unwrap()
            .len() as u64;
        let backend = RecordingBackend::new(&mock, Some(&self.calls_log())).resume_from(previous);
        let profile = profile();
        let prompts = PromptSet::default();
        let engine = Engine {
            profile: &profile,
            backend: &backend,
            prompts: &prompts,
            profiler: None,
            patterns_path: self.patterns_path.clone(),
            halt_after_round: halt,
        };
        run_session(session, &engine)
    }
}
