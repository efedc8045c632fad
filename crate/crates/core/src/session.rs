//! On-disk session layout.
//!
//! ```text
//! <session>/session.json
//! <session>/config.json                 resolved project config (no secrets)
//! <session>/mep/                         MEP construction attempts
//! <session>/baseline/                    initial baseline build
//! <session>/rounds/<d>/round.json
//! <session>/rounds/<d>/baseline/
//! <session>/rounds/<d>/candidate_<n>/{kernel.src, prompt.md, build.log, run.log,
//!                                     measurements.json, fe_report.json, repair_<i>.md}
//! <session>/closing/{initial,final}/
//! <session>/patterns.json
//! <session>/winner/{kernel.src, INTEGRATION.md}
//! <session>/llm_calls.jsonl
//! <session>/report.md, report.txt
//! ```
//!
//! Every file is written atomically (temp file plus rename) so a killed run
//! leaves either the old or the new content.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{RoundRecord, Session};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("corrupt session file {path}: {message}")]
    CorruptSession { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temp file and renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("session values serialize");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SessionError> {
    write_atomic(path, &to_json_bytes(value)).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, SessionError> {
    let bytes = fs::read(path).map_err(|e| SessionError::CorruptSession {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| SessionError::CorruptSession {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Paths inside a session directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionLayout {
    root: PathBuf,
}

impl SessionLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SessionLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_json(&self) -> PathBuf {
        self.root.join("session.json")
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn mep_dir(&self) -> PathBuf {
        self.root.join("mep")
    }

    pub fn initial_baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }

    pub fn rounds_dir(&self) -> PathBuf {
        self.root.join("rounds")
    }

    pub fn round_dir(&self, d: u32) -> PathBuf {
        self.rounds_dir().join(d.to_string())
    }

    pub fn round_json(&self, d: u32) -> PathBuf {
        self.round_dir(d).join("round.json")
    }

    pub fn round_baseline_dir(&self, d: u32) -> PathBuf {
        self.round_dir(d).join("baseline")
    }

    pub fn candidate_dir(&self, d: u32, n: u32) -> PathBuf {
        self.round_dir(d).join(format!("candidate_{n}"))
    }

    pub fn closing_dir(&self) -> PathBuf {
        self.root.join("closing")
    }

    pub fn patterns_json(&self) -> PathBuf {
        self.root.join("patterns.json")
    }

    pub fn winner_dir(&self) -> PathBuf {
        self.root.join("winner")
    }

    pub fn calls_log(&self) -> PathBuf {
        self.root.join("llm_calls.jsonl")
    }

    pub fn report_path(&self, extension: &str) -> PathBuf {
        self.root.join(format!("report.{extension}"))
    }
}

pub fn save_session(session: &Session) -> Result<(), SessionError> {
    write_json(
        &SessionLayout::new(&session.session_dir).session_json(),
        session,
    )
}

pub fn save_round(layout: &SessionLayout, round: &RoundRecord) -> Result<(), SessionError> {
    write_json(&layout.round_json(round.index), round)
}

pub fn load_round(path: &Path) -> Result<RoundRecord, SessionError> {
    let round: RoundRecord = read_json(path)?;
    Ok(round)
}

/// Loads `session.json` and the contiguous run of `rounds/<d>/round.json`
/// starting at 0.
pub fn load_session(dir: &Path) -> Result<Session, SessionError> {
    let layout = SessionLayout::new(dir);
    let mut session: Session = read_json(&layout.session_json())?;
    session.session_dir = dir.to_path_buf();
    let mut d = 0;
    loop {
        let path = layout.round_json(d);
        if !path.exists() {
            break;
        }
        let round = load_round(&path)?;
        if round.index != d {
            return Err(SessionError::CorruptSession {
                path,
                message: format!("round index {} stored under rounds/{d}", round.index),
            });
        }
        session.rounds.push(round);
        d += 1;
    }
    Ok(session)
}

/// Removes round directories past the last complete round (left by a run
/// that was killed mid-round) so they are never reused.
pub fn discard_partial_rounds(layout: &SessionLayout, complete: u32) -> Result<(), SessionError> {
    let rounds = layout.rounds_dir();
    let entries = match fs::read_dir(&rounds) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(source) => {
            return Err(SessionError::Io {
                path: rounds,
                source,
            })
        }
    };
    for entry in entries {
        let entry = entry.map_err(io_err(&rounds))?;
        let Ok(d) = entry.file_name().to_string_lossy().parse::<u32>() else {
            continue;
        };
        if d >= complete {
            fs::remove_dir_all(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::*;
    use proptest::prelude::*;

    pub(crate) fn round_strategy() -> impl Strategy<Value = RoundRecord> {
        let measurement = (
            proptest::collection::vec(1u64..u64::MAX / 64, 7..12),
            0u32..3,
        )
            .prop_map(|(samples, k)| MeasurementSet::from_samples(samples, k, 2).unwrap());
        let status = prop_oneof![
            Just(CandidateStatus::Feasible),
            Just(CandidateStatus::BuildFailed),
            Just(CandidateStatus::FeFailed),
            Just(CandidateStatus::SkippedDuplicate),
        ];
        let candidate = (
            1u32..10,
            "[ -~\\n\\t]{0,40}",
            status,
            0u32..4,
            proptest::option::of(measurement.clone()),
            "\\PC{0,30}",
        )
            .prop_map(|(n, text, status, repairs, m, diag)| Candidate {
                round_index: 3,
                candidate_index: n,
                source: KernelSource {
                    name: "k".into(),
                    source_text: text.clone(),
                    dialect: Dialect::CToy,
                    entry_symbol: "k".into(),
                },
                generated_hash: digest_text(&text),
                status,
                repair_count: repairs,
                measurement: m,
                diagnostics: diag,
            });
        let stop = prop_oneof![
            Just(None),
            Just(Some(StopReason::RoundCap)),
            Just(Some(StopReason::CarriedOver)),
            (-1.0f64..1.0).prop_map(|i| Some(StopReason::BelowThreshold { improvement: i })),
        ];
        (
            measurement,
            proptest::collection::vec(candidate, 0..5),
            proptest::option::of(1u32..6),
            any::<bool>(),
            any::<bool>(),
            stop,
        )
            .prop_map(
                |(bm, candidates, selected, carried, adopted, stop)| RoundRecord {
                    index: 3,
                    baseline_source_hash: digest_text("b"),
                    baseline_measurement: bm,
                    candidates,
                    selected,
                    carried_over: carried,
                    adopted,
                    stop,
                },
            )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_records_round_trip_bit_identically(round in round_strategy()) {
            let dir = tempfile::tempdir().unwrap();
            let layout = SessionLayout::new(dir.path());
            save_round(&layout, &round).unwrap();
            let first = fs::read(layout.round_json(3)).unwrap();
            let loaded = load_round(&layout.round_json(3)).unwrap();
            prop_assert_eq!(&loaded, &round);
            save_round(&layout, &loaded).unwrap();
            prop_assert_eq!(fs::read(layout.round_json(3)).unwrap(), first);
        }
    }

    #[test]
    fn truncated_round_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.json");
        fs::write(&path, "{\"index\": 0, \"baseline_").unwrap();
        match load_round(&path) {
            Err(SessionError::CorruptSession { path: p, .. }) => assert_eq!(p, path),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_rounds_are_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let layout = SessionLayout::new(dir.path());
        for d in 0..3 {
            fs::create_dir_all(layout.candidate_dir(d, 1)).unwrap();
        }
        discard_partial_rounds(&layout, 2).unwrap();
        assert!(layout.round_dir(1).exists());
        assert!(!layout.round_dir(2).exists());
    }
}
