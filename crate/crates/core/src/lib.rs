//! Kernel optimization without full application builds.
//!
//! A hotspot kernel is wrapped into a Minimal Executable Program (MEP) that
//! generates its own input, times the kernel and writes one output tensor.
//! The optimizer then runs a round-based loop: a language model proposes
//! candidate kernels, each candidate is compiled, checked for functional
//! equivalence against the round baseline and timed with a trimmed mean; the
//! fastest feasible candidate becomes the next baseline.
//!
//! Module map:
//!
//! * [`domain`]: shared value types and configuration validation
//! * [`toolchain`]: template-driven compile/run adapter with timeouts
//! * [`protocol`]: MEP stdout line protocol and the `MEPO` tensor file
//! * [`measurement`]: trimmed mean, time/data constraints, speedup
//! * [`equivalence`]: output comparison (the feasibility predicate)
//! * [`llm`]: model backends (HTTP and scripted mock) and prompt templates
//! * [`mep_builder`]: MEP construction, repair and problem-size search
//! * [`optimizer`]: the round loop, candidate pipeline and repair dispatch
//! * [`patterns`]: persisted optimization patterns injected as hints
//! * [`session`]: on-disk session layout and persistence
//! * [`report`]: text/markdown reports and the verifier
//! * [`config`]: project configuration file
//! * [`project`]: `init` scaffolding

pub mod config;
pub mod domain;
pub mod equivalence;
pub mod llm;
pub mod measurement;
pub mod mep_builder;
pub mod optimizer;
pub mod patterns;
pub mod project;
pub mod protocol;
pub mod report;
pub mod session;
pub mod toolchain;

pub use domain::{
    Candidate, CandidateStatus, Dialect, KernelSource, MeasurementSet, MepConstraints, MepProgram,
    OptimizerConfig, PatternCategory, PatternRecord, RoundRecord, Session, SessionMode, SourceFile,
    StopReason,
};
pub use optimizer::{run_session, OptimizeError, RunOutcome};
