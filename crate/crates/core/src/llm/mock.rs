use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{Backend, LlmError, LlmRequest, Stage};

/// Replays scripted responses from `<dir>/<stage>/r<d>_c<n>.md`.
///
/// `n` is the candidate index, or 0 when the request has none. A file named
/// `r<d>_c<n>_a<i>.md` takes precedence for repair attempt `i`, which lets a
/// script vary successive repairs of one candidate.
pub struct MockBackend {
    dir: PathBuf,
    calls: Mutex<Vec<LlmRequest>>,
}

impl MockBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MockBackend {
            dir: dir.into(),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of the script answering `(stage, round, candidate)`.
    pub fn script_path(&self, stage: Stage, round: u32, candidate: Option<u32>) -> PathBuf {
        self.dir
            .join(stage.as_str())
            .join(format!("r{round}_c{}.md", candidate.unwrap_or(0)))
    }

    fn attempt_path(
        &self,
        stage: Stage,
        round: u32,
        candidate: Option<u32>,
        attempt: u32,
    ) -> PathBuf {
        self.dir.join(stage.as_str()).join(format!(
            "r{round}_c{}_a{attempt}.md",
            candidate.unwrap_or(0)
        ))
    }

    /// Every request received so far, in order.
    pub fn calls(&self) -> Vec<LlmRequest> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        let specific = self.attempt_path(
            request.stage,
            request.round_index,
            request.candidate_index,
            request.attempt,
        );
        let path = if request.attempt > 0 && specific.is_file() {
            specific
        } else {
            self.script_path(request.stage, request.round_index, request.candidate_index)
        };
        fs::read_to_string(&path).map_err(|_| LlmError::MockScriptMissing {
            stage: request.stage,
            round: request.round_index,
            candidate: request.candidate_index.unwrap_or(0),
            path,
        })
    }

    fn name(&self) -> &str {
        "mock"
    }
}
