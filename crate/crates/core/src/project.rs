//! `init` scaffolding: a commented config, the prompt templates, a toy C
//! kernel and mock scripts that let the example run without a model.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::llm::prompt::PromptSet;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("{0} is not empty (use --force to overwrite)")]
    DirNotEmpty(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Config file name written by [`init`].
pub const CONFIG_FILE: &str = "mepopt.toml";

const FILES: &[(&str, &str)] = &[
    (CONFIG_FILE, include_str!("../scaffold/mepopt.toml")),
    ("kernel.c", include_str!("../scaffold/kernel.c")),
    (
        "mock/build_mep/r0_c0.md",
        include_str!("../scaffold/mock/build_mep/r0_c0.md"),
    ),
    (
        "mock/generate_candidates/r0_c1.md",
        include_str!("../scaffold/mock/generate_candidates/r0_c1.md"),
    ),
    (
        "mock/generate_candidates/r0_c2.md",
        include_str!("../scaffold/mock/generate_candidates/r0_c2.md"),
    ),
    (
        "mock/generate_candidates/r1_c1.md",
        include_str!("../scaffold/mock/generate_candidates/r1_c1.md"),
    ),
    (
        "mock/generate_candidates/r1_c2.md",
        include_str!("../scaffold/mock/generate_candidates/r1_c2.md"),
    ),
    (
        "mock/repair/r0_c2.md",
        include_str!("../scaffold/mock/repair/r0_c2.md"),
    ),
    (
        "mock/repair/r1_c1.md",
        include_str!("../scaffold/mock/repair/r1_c1.md"),
    ),
    (
        "mock/summarize_patterns/r0_c1.md",
        include_str!("../scaffold/mock/summarize_patterns/r0_c1.md"),
    ),
    (
        "mock/summarize_patterns/r0_c2.md",
        include_str!("../scaffold/mock/summarize_patterns/r0_c2.md"),
    ),
];

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> InitError + '_ {
    move |source| InitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the example project into `dir` and returns the files written.
/// Refuses a non-empty directory unless `force` is set.
pub fn init(dir: &Path, force: bool) -> Result<Vec<PathBuf>, InitError> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() && !force {
                return Err(InitError::DirNotEmpty(dir.to_path_buf()));
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(dir)(e)),
    }
    let mut written = Vec::new();
    for (rel, text) in FILES {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    let prompts = dir.join("prompts");
    PromptSet::default()
        .write_to(&prompts)
        .map_err(io_err(&prompts))?;
    for entry in fs::read_dir(&prompts).map_err(io_err(&prompts))? {
        written.push(entry.map_err(io_err(&prompts))?.path());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProjectConfig;

    #[test]
    fn scaffold_config_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        init(dir.path(), false).unwrap();
        let config = ProjectConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        config.validate().unwrap();
        config.kernel_source().unwrap();
        config.prompt_set().unwrap();
    }

    #[test]
    fn refuses_non_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        init(dir.path(), false).unwrap();
        assert!(matches!(
            init(dir.path(), false),
            Err(InitError::DirNotEmpty(_))
        ));
        init(dir.path(), true).unwrap();
    }
}
