//! Project configuration (`mepopt.toml`).
//!
//! Relative paths are resolved against the directory holding the config file.
//! The API key may only be given as `"${VAR}"`; the variable is read when the
//! HTTP backend is created, so the key itself never enters a file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_config, Dialect, DomainError, KernelSource, MepConstraints, OptimizerConfig,
};
use crate::llm::prompt::PromptSet;
use crate::llm::{Backend, LlmError, MockBackend};
use crate::llm::{HttpBackend, HttpSettings};
use crate::toolchain::{ToolchainError, ToolchainProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub name: String,
    pub path: PathBuf,
    pub dialect: Dialect,
    pub entry_symbol: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolchainSection {
    /// Compile argv template; defaults to the stock compiler for the dialect.
    pub compile: Option<Vec<String>>,
    pub run: Option<Vec<String>>,
    pub run_timeout_ms: Option<u64>,
    pub compile_timeout_ms: Option<u64>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default = "default_mock_dir")]
    pub mock_dir: PathBuf,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Must have the form `"${VAR}"`.
    pub api_key: Option<String>,
    pub max_retries: Option<u32>,
    pub backoff_base_ms: Option<u64>,
    pub request_timeout_s: Option<u64>,
}

fn default_mock_dir() -> PathBuf {
    PathBuf::from("mock")
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            mock_dir: default_mock_dir(),
            endpoint: None,
            model: None,
            api_key: None,
            max_retries: None,
            backoff_base_ms: None,
            request_timeout_s: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilerSection {
    /// Argv template run against the baseline executable; its stdout is
    /// passed to the model verbatim.
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MepSection {
    /// Directory with ready-made MEP sources; skips LLM construction.
    pub existing: Option<PathBuf>,
    /// Fixed problem size for an existing MEP; searched when absent.
    pub problem_size: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    /// Session directory; defaults to `sessions/<kernel>-<unix time>`.
    pub dir: Option<PathBuf>,
    /// Pattern store shared across sessions.
    pub patterns_file: Option<PathBuf>,
    /// Keep patterns inside the session directory only.
    #[serde(default)]
    pub isolated_patterns: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptsSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub kernel: KernelSection,
    pub constraints: MepConstraints,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub toolchain: ToolchainSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub profiler: ProfilerSection,
    #[serde(default)]
    pub mep: MepSection,
    #[serde(default)]
    pub session: SessionSection,
    #[serde(default)]
    pub prompts: PromptsSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Name of the variable in a `"${VAR}"` reference.
pub fn env_reference(value: &str) -> Option<&str> {
    let name = value.strip_prefix("${")?.strip_suffix('}')?;
    let valid = !name.is_empty()
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
        && !name.as_bytes()[0].is_ascii_digit();
    valid.then_some(name)
}

impl ProjectConfig {
    pub fn parse(text: &str, base_dir: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut config: ProjectConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        ProjectConfig::parse(&text, &base, path)
    }

    /// Reads a config persisted as JSON in a session directory.
    pub fn from_json(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ProjectConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        config.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(config)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Copy with every path made absolute, suitable for persisting.
    pub fn absolutized(&self) -> ProjectConfig {
        let mut c = self.clone();
        c.kernel.path = self.resolve(&self.kernel.path);
        c.backend.mock_dir = self.resolve(&self.backend.mock_dir);
        c.mep.existing = self.mep.existing.as_deref().map(|p| self.resolve(p));
        c.session.dir = self.session.dir.as_deref().map(|p| self.resolve(p));
        c.session.patterns_file = Some(match &self.session.patterns_file {
            Some(p) => self.resolve(p),
            None => self.base_dir.join("patterns.json"),
        });
        c.prompts.dir = self.prompts.dir.as_deref().map(|p| self.resolve(p));
        c
    }

    /// Checks every section without touching the filesystem beyond the
    /// kernel file.
    pub fn validate(&self) -> Result<OptimizerConfig, ConfigError> {
        let optimizer = validate_config(self.optimizer.clone(), &self.constraints)?;
        self.toolchain_profile().validate(Some(&self.constraints))?;
        if let Some(key) = &self.backend.api_key {
            if env_reference(key).is_none() {
                return Err(ConfigError::Invalid(
                    "backend.api_key must reference an environment variable as \"${NAME}\"".into(),
                ));
            }
        }
        if self.backend.kind == BackendKind::Http
            && (self.backend.endpoint.is_none() || self.backend.model.is_none())
        {
            return Err(ConfigError::Invalid(
                "backend.kind = \"http\" needs backend.endpoint and backend.model".into(),
            ));
        }
        if self.mep.problem_size == Some(0) {
            return Err(ConfigError::Invalid(
                "mep.problem_size must be positive".into(),
            ));
        }
        if let Some(cmd) = &self.profiler.command {
            if cmd.is_empty() {
                return Err(ConfigError::Invalid("profiler.command is empty".into()));
            }
        }
        Ok(optimizer)
    }

    pub fn kernel_source(&self) -> Result<KernelSource, ConfigError> {
        let path = self.resolve(&self.kernel.path);
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })?;
        Ok(KernelSource::new(
            &self.kernel.name,
            text,
            self.kernel.dialect,
            &self.kernel.entry_symbol,
        )?)
    }

    pub fn toolchain_profile(&self) -> ToolchainProfile {
        let mut profile = ToolchainProfile::default_for(self.kernel.dialect);
        let t = &self.toolchain;
        if let Some(c) = &t.compile {
            profile.compile_argv = c.clone();
            profile.name = format!("{}-custom", self.kernel.dialect);
        }
        if let Some(r) = &t.run {
            profile.run_argv = r.clone();
        }
        if let Some(ms) = t.run_timeout_ms {
            profile.run_timeout_ms = ms;
        } else {
            let needed = self
                .constraints
                .t_max_ns
                .saturating_mul(2)
                .div_ceil(1_000_000);
            profile.run_timeout_ms = profile.run_timeout_ms.max(needed);
        }
        if let Some(ms) = t.compile_timeout_ms {
            profile.compile_timeout_ms = ms;
        }
        profile.env = t.env.clone();
        profile
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ConfigError> {
        match &self.prompts.dir {
            Some(dir) => Ok(PromptSet::load(&self.resolve(dir))?),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn http_settings(&self) -> Result<HttpSettings, ConfigError> {
        let b = &self.backend;
        let (Some(endpoint), Some(model)) = (&b.endpoint, &b.model) else {
            return Err(ConfigError::Invalid(
                "http backend needs backend.endpoint and backend.model".into(),
            ));
        };
        let api_key_env = match &b.api_key {
            Some(k) => Some(
                env_reference(k)
                    .ok_or_else(|| {
                        ConfigError::Invalid(
                            "backend.api_key must have the form \"${NAME}\"".into(),
                        )
                    })?
                    .to_string(),
            ),
            None => None,
        };
        Ok(HttpSettings {
            endpoint: endpoint.clone(),
            model: model.clone(),
            api_key_env,
            max_retries: b.max_retries.unwrap_or(3),
            backoff_base_ms: b.backoff_base_ms.unwrap_or(1_000),
            request_timeout_s: b.request_timeout_s.unwrap_or(600),
        })
    }

    /// Instantiates the configured backend. The API key is read from the
    /// environment here and held only by the backend.
    pub fn make_backend(&self) -> Result<Box<dyn Backend>, ConfigError> {
        match self.backend.kind {
            BackendKind::Mock => Ok(Box::new(MockBackend::new(
                self.resolve(&self.backend.mock_dir),
            ))),
            BackendKind::Http => Ok(Box::new(HttpBackend::from_env(self.http_settings()?)?)),
        }
    }

    /// Pattern store location: the session's own file when isolated, the
    /// configured file, or `patterns.json` next to the config.
    pub fn patterns_path(&self, session_dir: &Path) -> PathBuf {
        if self.session.isolated_patterns {
            return session_dir.join("patterns.json");
        }
        match &self.session.patterns_file {
            Some(p) => self.resolve(p),
            None => self.base_dir.join("patterns.json"),
        }
    }
}
