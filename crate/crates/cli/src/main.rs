//! `mepopt`: build a Minimal Executable Program around a kernel and optimize
//! the kernel with a model-driven, measurement-gated loop.
//!
//! Exit codes: 0 success, 1 verification failed, 2 configuration or input
//! error, 3 MEP construction failed, 4 infrastructure failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mepopt_core::config::{BackendKind, ConfigError, ProjectConfig};
use mepopt_core::llm::{read_call_log, RecordingBackend};
use mepopt_core::mep_builder::{adopt_existing_mep, build_mep, BuildContext, MepBuildError};
use mepopt_core::optimizer::{run_session, Engine, OptimizeError, RunOutcome};
use mepopt_core::project::{self, InitError, CONFIG_FILE};
use mepopt_core::report::{verify_dir, write_report, ReportError, ReportFormat};
use mepopt_core::session::{self, write_json, SessionError, SessionLayout};
use mepopt_core::{Session, SessionMode};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MEP: u8 = 3;
const EXIT_INFRA: u8 = 4;

#[derive(Parser)]
#[command(
    name = "mepopt",
    version,
    about = "LLM-driven kernel optimization through Minimal Executable Programs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an example project (config, prompts, toy kernel, mock scripts).
    Init {
        dir: PathBuf,
        /// Overwrite files in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Build the MEP and run the optimization loop.
    Optimize(OptimizeArgs),
    /// Render the report of a session directory.
    Report {
        session_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Md)]
        format: FormatArg,
        /// Sibling session run with --direct, for the comparison line.
        #[arg(long)]
        direct_session: Option<PathBuf>,
        /// Also recompute every number from the raw samples.
        #[arg(long)]
        verify: bool,
    },
    /// Recompute trimmed means, selections and speedups from raw samples.
    Verify { session_dir: PathBuf },
}

#[derive(Args)]
struct OptimizeArgs {
    /// Project config file.
    #[arg(default_value = CONFIG_FILE)]
    config: PathBuf,
    /// Continue the session in this directory from its last complete round.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// One generation round with a single candidate and no feedback.
    #[arg(long)]
    direct: bool,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Round cap (D).
    #[arg(long)]
    rounds: Option<u32>,
    /// Candidates per round (N).
    #[arg(long)]
    candidates: Option<u32>,
    /// Session directory to create.
    #[arg(long)]
    session_dir: Option<PathBuf>,
    #[arg(long)]
    patterns_file: Option<PathBuf>,
    /// Keep patterns inside the session directory.
    #[arg(long)]
    isolated_patterns: bool,
    /// Stop after persisting this round (the session stays resumable).
    #[arg(long, hide = true)]
    halt_after_round: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

impl From<MepBuildError> for Failure {
    fn from(e: MepBuildError) -> Self {
        let code = match &e {
            MepBuildError::MepConstructionFailed { .. }
            | MepBuildError::ConstraintsInfeasible { .. }
            | MepBuildError::NonMonotonic { .. }
            | MepBuildError::Probe { .. }
            | MepBuildError::Domain(_) => EXIT_MEP,
            MepBuildError::Llm(l) if !l.is_infrastructure() => EXIT_MEP,
            _ => EXIT_INFRA,
        };
        Failure::new(code, e)
    }
}

impl From<OptimizeError> for Failure {
    fn from(e: OptimizeError) -> Self {
        Failure::new(EXIT_INFRA, e)
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::CorruptSession { .. } => Failure::new(EXIT_CONFIG, e),
            SessionError::Io { .. } => Failure::new(EXIT_INFRA, e),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Session(s) => s.into(),
            other => Failure::new(EXIT_INFRA, other),
        }
    }
}

impl From<InitError> for Failure {
    fn from(e: InitError) -> Self {
        match e {
            InitError::DirNotEmpty(_) => Failure::new(EXIT_CONFIG, e),
            InitError::Io { .. } => Failure::new(EXIT_INFRA, e),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { dir, force } => cmd_init(&dir, force),
        Command::Optimize(args) => cmd_optimize(&args),
        Command::Report {
            session_dir,
            format,
            direct_session,
            verify,
        } => cmd_report(&session_dir, format, direct_session.as_deref(), verify),
        Command::Verify { session_dir } => cmd_verify(&session_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_init(dir: &Path, force: bool) -> Result<(), Failure> {
    let files = project::init(dir, force)?;
    println!("wrote {} files to {}", files.len(), dir.display());
    println!(
        "next: cd {} && mepopt optimize {CONFIG_FILE}",
        dir.display()
    );
    Ok(())
}

fn apply_overrides(config: &mut ProjectConfig, args: &OptimizeArgs) {
    if let Some(b) = args.backend {
        config.backend.kind = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Http => BackendKind::Http,
        };
    }
    if let Some(d) = args.rounds {
        config.optimizer.rounds_d = d;
    }
    if let Some(n) = args.candidates {
        config.optimizer.candidates_n = n;
    }
    if let Some(p) = &args.patterns_file {
        config.session.patterns_file = Some(absolute(p));
    }
    if args.isolated_patterns {
        config.session.isolated_patterns = true;
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|c| c.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    }
}

fn default_session_dir(config: &ProjectConfig, direct: bool) -> PathBuf {
    let base = match &config.session.dir {
        Some(d) => config.resolve(d),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default();
            config
                .base_dir
                .join("sessions")
                .join(format!("{}-{secs}", config.kernel.name))
        }
    };
    if direct {
        let mut name = base.file_name().unwrap_or_default().to_os_string();
        name.push("-direct");
        base.with_file_name(name)
    } else {
        base
    }
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<(), Failure> {
    if let Some(dir) = &args.resume {
        return resume(dir, args);
    }
    let mut config = ProjectConfig::load(&args.config)?;
    apply_overrides(&mut config, args);
    let optimizer = config.validate()?;
    let kernel = config.kernel_source()?;
    let profile = config.toolchain_profile();
    let prompts = config.prompt_set()?;
    let backend = config.make_backend()?;

    let dir = match &args.session_dir {
        Some(d) => absolute(d),
        None => default_session_dir(&config, args.direct),
    };
    let layout = SessionLayout::new(&dir);
    if layout.session_json().exists() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{} already holds a session; use --resume", dir.display()),
        ));
    }
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::new(EXIT_INFRA, format!("{}: {e}", dir.display())))?;
    let persisted = config.absolutized();
    write_json(&layout.config_json(), &persisted)?;
    info!("session directory {}", dir.display());

    let recording = RecordingBackend::new(backend.as_ref(), Some(&layout.calls_log()));
    let ctx = BuildContext {
        constraints: &config.constraints,
        config: &optimizer,
        backend: &recording,
        profile: &profile,
        prompts: &prompts,
        session_dir: &dir,
    };
    let mep = match &config.mep.existing {
        Some(existing) => adopt_existing_mep(
            &kernel,
            &config.resolve(existing),
            config.mep.problem_size,
            &ctx,
        )?,
        None => build_mep(&kernel, &ctx)?,
    };
    info!(
        "MEP ready: problem size {}, {} input bytes, {} repairs",
        mep.problem_size, mep.reported_data_bytes, mep.repair_count
    );
    let mode = if args.direct {
        SessionMode::Direct
    } else {
        SessionMode::Feedback
    };
    let mut session = Session::new(
        dir.clone(),
        mode,
        kernel,
        mep,
        optimizer,
        config.constraints,
    )
    .map_err(|e| Failure::new(EXIT_MEP, e))?;
    session::save_session(&session)?;
    drive(&mut session, &persisted, &recording, args.halt_after_round)
}

fn resume(dir: &Path, args: &OptimizeArgs) -> Result<(), Failure> {
    let layout = SessionLayout::new(dir);
    let mut config = ProjectConfig::from_json(&layout.config_json())?;
    if let Some(b) = args.backend {
        config.backend.kind = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Http => BackendKind::Http,
        };
    }
    let mut session = session::load_session(dir)?;
    let backend = config.make_backend()?;
    let previous = read_call_log(&layout.calls_log())
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?
        .len() as u64;
    let recording =
        RecordingBackend::new(backend.as_ref(), Some(&layout.calls_log())).resume_from(previous);
    info!(
        "resuming {} after {} complete rounds",
        dir.display(),
        session.rounds.len()
    );
    drive(&mut session, &config, &recording, args.halt_after_round)
}

fn drive(
    session: &mut Session,
    config: &ProjectConfig,
    backend: &RecordingBackend<'_>,
    halt_after_round: Option<u32>,
) -> Result<(), Failure> {
    let profile = config.toolchain_profile();
    let prompts = config.prompt_set()?;
    let engine = Engine {
        profile: &profile,
        backend,
        prompts: &prompts,
        profiler: config.profiler.command.as_deref(),
        patterns_path: Some(config.patterns_path(&session.session_dir)),
        halt_after_round,
    };
    match run_session(session, &engine)? {
        RunOutcome::Halted { rounds } => {
            println!(
                "halted after {rounds} round(s); continue with: mepopt optimize --resume {}",
                session.session_dir.display()
            );
        }
        RunOutcome::Completed => {
            let dir = session.session_dir.clone();
            write_report(&dir, ReportFormat::Text, None)?;
            write_report(&dir, ReportFormat::Markdown, None)?;
            println!(
                "session completed: {} round(s), final speedup {}",
                session.rounds.len(),
                session
                    .final_speedup
                    .map(|s| format!("{s:.4}x"))
                    .unwrap_or_else(|| "n/a".into())
            );
            println!(
                "report: {}",
                SessionLayout::new(&dir).report_path("md").display()
            );
            println!("{} model calls", backend.call_count());
        }
    }
    Ok(())
}

fn cmd_report(
    dir: &Path,
    format: FormatArg,
    direct: Option<&Path>,
    verify: bool,
) -> Result<(), Failure> {
    let format = match format {
        FormatArg::Text => ReportFormat::Text,
        FormatArg::Md => ReportFormat::Markdown,
    };
    let text = write_report(dir, format, direct)?;
    print!("{text}");
    if verify {
        println!();
        cmd_verify(dir)?;
    }
    Ok(())
}

fn cmd_verify(dir: &Path) -> Result<(), Failure> {
    let report = verify_dir(dir)?;
    print!("{}", report.render());
    if report.ok() {
        println!("verification passed ({} checks)", report.checks.len());
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_VERIFY,
            format!(
                "{} of {} checks failed",
                report.failures().len(),
                report.checks.len()
            ),
        ))
    }
}
