//! Uniform access to the candidate-producing model.
//!
//! Two backends exist: [`HttpBackend`] talks to an OpenAI-compatible chat
//! endpoint, [`MockBackend`] replays scripted responses from a directory so
//! whole sessions are reproducible. Prompt templates live in [`prompt`].

mod http;
mod mock;
pub mod prompt;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpSettings};
pub use mock::MockBackend;
pub use prompt::{render_prompt, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BuildMep,
    GenerateCandidates,
    Repair,
    SummarizePatterns,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::BuildMep,
        Stage::GenerateCandidates,
        Stage::Repair,
        Stage::SummarizePatterns,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::BuildMep => "build_mep",
            Stage::GenerateCandidates => "generate_candidates",
            Stage::Repair => "repair",
            Stage::SummarizePatterns => "summarize_patterns",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub stage: Stage,
    pub prompt: String,
    pub round_index: u32,
    /// `None` for requests not tied to a candidate slot.
    pub candidate_index: Option<u32>,
    /// Repair attempt number (1-based); 0 for first-shot requests.
    pub attempt: u32,
    pub temperature_hint: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub filename_hint: Option<String>,
    pub language: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub code_blocks: Vec<CodeBlock>,
    pub commentary: String,
    pub raw: String,
}

impl LlmResponse {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let (code_blocks, commentary) = extract_code_blocks(&raw);
        LlmResponse {
            code_blocks,
            commentary,
            raw,
        }
    }

    /// Last fenced block; models often restate and then correct themselves.
    pub fn last_block(&self) -> Option<&CodeBlock> {
        self.code_blocks.last()
    }

    /// One entry per distinct file: the last block for each filename hint,
    /// blocks without a hint counting as `default_name`. Order of first
    /// appearance is kept.
    pub fn files(&self, default_name: &str) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for block in &self.code_blocks {
            let name = block
                .filename_hint
                .clone()
                .unwrap_or_else(|| default_name.to_string());
            match out.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = block.text.clone(),
                None => out.push((name, block.text.clone())),
            }
        }
        out
    }
}

/// Splits markdown into fenced code blocks and the surrounding prose.
pub fn extract_code_blocks(raw: &str) -> (Vec<CodeBlock>, String) {
    let mut blocks = Vec::new();
    let mut commentary = String::new();
    let mut open: Option<(usize, CodeBlock)> = None;
    for line in raw.split_inclusive('\n') {
        let trimmed = line.trim();
        let ticks = trimmed.bytes().take_while(|&b| b == b'`').count();
        match open.take() {
            None if ticks >= 3 => {
                let (language, filename_hint) = parse_info_string(&trimmed[ticks..]);
                open = Some((
                    ticks,
                    CodeBlock {
                        filename_hint,
                        language,
                        text: String::new(),
                    },
                ));
            }
            None => commentary.push_str(line),
            Some((n, block)) if ticks >= n && trimmed.len() == ticks => blocks.push(block),
            Some((n, mut block)) => {
                block.text.push_str(line);
                open = Some((n, block));
            }
        }
    }
    // An unterminated fence still yields its content.
    if let Some((_, block)) = open {
        blocks.push(block);
    }
    (blocks, commentary.trim().to_string())
}

fn parse_info_string(info: &str) -> (Option<String>, Option<String>) {
    let mut language = None;
    let mut filename = None;
    for (i, token) in info.split_whitespace().enumerate() {
        let value = token
            .strip_prefix("file=")
            .or_else(|| token.strip_prefix("title="))
            .or_else(|| token.strip_prefix("filename="))
            .map(|v| v.trim_matches('"'));
        if let Some(v) = value {
            filename = Some(v.to_string());
        } else if i == 0 && !token.contains('.') {
            language = Some(token.to_string());
        } else if token.contains('.') {
            filename = Some(token.trim_matches('"').to_string());
        }
    }
    (language, filename)
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend rejected the request with HTTP {status}: {body}")]
    BackendRejected { status: u16, body: String },
    #[error("mock script missing for {stage} round {round} candidate {candidate}: {path}")]
    MockScriptMissing {
        stage: Stage,
        round: u32,
        candidate: u32,
        path: PathBuf,
    },
    #[error("response for stage {stage} contains no fenced code block")]
    EmptyResponse { stage: Stage, raw: String },
    #[error("prompt placeholder {{{0}}} has no value")]
    MissingPlaceholder(String),
    #[error("prompt template for stage {0} not found")]
    MissingTemplate(Stage),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LlmError {
    /// Failures of the backend itself rather than of the model output.
    pub fn is_infrastructure(&self) -> bool {
        !matches!(self, LlmError::EmptyResponse { .. })
    }
}

pub trait Backend: Send + Sync {
    /// Returns the model's raw answer to the request.
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;

    fn name(&self) -> &str;
}

/// Sends the request and extracts code blocks; a response without any block
/// is an [`LlmError::EmptyResponse`].
pub fn invoke(backend: &dyn Backend, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
    let raw = backend.complete(request)?;
    let response = LlmResponse::from_raw(raw);
    if response.code_blocks.is_empty() {
        return Err(LlmError::EmptyResponse {
            stage: request.stage,
            raw: response.raw,
        });
    }
    Ok(response)
}

/// One line of `llm_calls.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub stage: Stage,
    pub round_index: u32,
    pub candidate_index: Option<u32>,
    pub attempt: u32,
    pub prompt_chars: usize,
    pub response_chars: Option<usize>,
    pub error: Option<String>,
}

/// Wraps a backend, appending one JSON line per call to a log file and
/// counting calls. Prompts and credentials are not logged.
pub struct RecordingBackend<'a> {
    inner: &'a dyn Backend,
    log_path: Option<PathBuf>,
    calls: AtomicU64,
    chars: AtomicU64,
    write_lock: Mutex<()>,
}

impl<'a> RecordingBackend<'a> {
    pub fn new(inner: &'a dyn Backend, log_path: Option<&Path>) -> Self {
        RecordingBackend {
            inner,
            log_path: log_path.map(Path::to_path_buf),
            calls: AtomicU64::new(0),
            chars: AtomicU64::new(0),
            write_lock: Mutex::new(()),
        }
    }

    /// Continues numbering after previously logged calls.
    pub fn resume_from(self, calls: u64) -> Self {
        self.calls.store(calls, Ordering::SeqCst);
        self
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Characters exchanged (prompt plus response) so far.
    pub fn char_count(&self) -> u64 {
        self.chars.load(Ordering::SeqCst)
    }
}

impl Backend for RecordingBackend<'_> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let seq = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let result = self.inner.complete(request);
        let response_chars = result.as_ref().ok().map(|r| r.len());
        self.chars.fetch_add(
            (request.prompt.len() + response_chars.unwrap_or(0)) as u64,
            Ordering::SeqCst,
        );
        if let Some(path) = &self.log_path {
            let record = CallRecord {
                seq,
                stage: request.stage,
                round_index: request.round_index,
                candidate_index: request.candidate_index,
                attempt: request.attempt,
                prompt_chars: request.prompt.len(),
                response_chars,
                error: result.as_ref().err().map(|e| e.to_string()),
            };
            let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
            let line = serde_json::to_string(&record).expect("call record serializes");
            let appended = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = appended {
                log::warn!("could not append to {}: {e}", path.display());
            }
        }
        result
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Reads `llm_calls.jsonl`.
pub fn read_call_log(path: &Path) -> Result<Vec<CallRecord>, LlmError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(LlmError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| LlmError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}
