//! Pattern inheritance: optimization strategies that produced a speedup are
//! summarized, stored with their evidence, and the strongest ones are fed
//! back into later generation prompts.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use similar::TextDiff;
use thiserror::Error;

use crate::domain::{digest_text, KernelSource, PatternCategory, PatternEvidence, PatternRecord};
use crate::llm::prompt::PromptContext;
use crate::llm::{invoke, Backend, LlmRequest, LlmResponse, PromptSet, Stage};

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed pattern store {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("evidence speedup {speedup} does not exceed the improvement threshold {threshold}")]
    WeakEvidence { speedup: f64, threshold: f64 },
}

/// Versioned on-disk record list (`patterns.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternStore {
    pub version: u32,
    pub next_seq: u64,
    pub patterns: Vec<PatternRecord>,
}

impl Default for PatternStore {
    fn default() -> Self {
        PatternStore {
            version: STORE_VERSION,
            next_seq: 1,
            patterns: Vec::new(),
        }
    }
}

/// Lowercased, whitespace-collapsed, without trailing punctuation.
pub fn normalize_description(description: &str) -> String {
    description
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_end_matches(['.', '!', ';'])
        .to_string()
}

impl PatternStore {
    /// Missing file means an empty store.
    pub fn load(path: &Path) -> Result<Self, PatternError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(PatternStore::default()),
            Err(source) => {
                return Err(PatternError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        };
        let store: PatternStore =
            serde_json::from_str(&text).map_err(|e| PatternError::Malformed {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if store.version != STORE_VERSION {
            return Err(PatternError::Malformed {
                path: path.to_path_buf(),
                message: format!("unsupported version {}", store.version),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), PatternError> {
        let json = serde_json::to_string_pretty(self).expect("pattern store serializes");
        crate::session::write_atomic(path, json.as_bytes()).map_err(|source| PatternError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Adds a pattern, or appends evidence to the record with the same
    /// normalized description. Returns the record id.
    pub fn record(
        &mut self,
        category: PatternCategory,
        description: &str,
        hint_text: &str,
        kernel_name: &str,
        round_index: u32,
        speedup: f64,
        epsilon: f64,
    ) -> Result<String, PatternError> {
        let threshold = 1.0 + epsilon;
        if !(speedup > threshold) {
            return Err(PatternError::WeakEvidence { speedup, threshold });
        }
        let id = digest_text(&normalize_description(description));
        let evidence = PatternEvidence {
            kernel_name: kernel_name.to_string(),
            round_index,
            speedup,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        match self.patterns.iter_mut().find(|p| p.id == id) {
            Some(existing) => existing.evidence.push(evidence),
            None => self.patterns.push(PatternRecord {
                id: id.clone(),
                category,
                description: description.trim().to_string(),
                hint_text: hint_text.trim().to_string(),
                evidence: vec![evidence],
            }),
        }
        Ok(id)
    }

    /// Up to `m` records by best evidence speedup, descending; ties go to the
    /// most recently evidenced record.
    pub fn top_patterns(&self, m: usize) -> Vec<PatternRecord> {
        let mut sorted: Vec<&PatternRecord> = self.patterns.iter().collect();
        sorted.sort_by(|a, b| {
            b.max_speedup()
                .total_cmp(&a.max_speedup())
                .then(b.latest_seq().cmp(&a.latest_seq()))
        });
        sorted.into_iter().take(m).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct SummaryItem {
    #[serde(default)]
    category: String,
    description: String,
    #[serde(default, alias = "hint_text")]
    hint: String,
}

/// Parses the summarizer's json block into `(category, description, hint)`.
pub fn parse_summary(
    response: &LlmResponse,
) -> Result<Vec<(PatternCategory, String, String)>, String> {
    let block = response
        .code_blocks
        .iter()
        .rev()
        .find(|b| b.language.as_deref() == Some("json"))
        .or_else(|| response.last_block())
        .ok_or("no code block")?;
    let value: serde_json::Value = serde_json::from_str(&block.text).map_err(|e| e.to_string())?;
    let items: Vec<SummaryItem> = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value),
        other => serde_json::from_value(other).map(|single| vec![single]),
    }
    .map_err(|e| e.to_string())?;
    Ok(items
        .into_iter()
        .filter(|i| !i.description.trim().is_empty())
        .map(|i| {
            let hint = if i.hint.trim().is_empty() {
                i.description.clone()
            } else {
                i.hint
            };
            (
                PatternCategory::parse_loose(&i.category),
                i.description,
                hint,
            )
        })
        .collect())
}

/// What the summarizer needs to know about one improving round.
pub struct WinnerSummary<'a> {
    pub kernel: &'a KernelSource,
    pub round_index: u32,
    pub winner_index: u32,
    pub baseline_source: &'a str,
    pub winner_source: &'a str,
    pub baseline_mean_ns: u64,
    pub winner_mean_ns: u64,
    pub speedup: f64,
}

/// Asks the model to summarize a winning change and records the result.
/// Rounds whose speedup does not exceed `1 + epsilon` are skipped; failures
/// are logged and skipped. Returns the ids of touched records.
pub fn extract_patterns(
    store: &mut PatternStore,
    summary: &WinnerSummary<'_>,
    epsilon: f64,
    backend: &dyn Backend,
    prompts: &PromptSet,
) -> Vec<String> {
    if !(summary.speedup > 1.0 + epsilon) {
        return Vec::new();
    }
    let diff = TextDiff::from_lines(summary.baseline_source, summary.winner_source)
        .unified_diff()
        .context_radius(3)
        .header("baseline", "winner")
        .to_string();
    let mut ctx = PromptContext::new();
    ctx.insert("dialect", summary.kernel.dialect.to_string());
    ctx.insert("kernel_name", summary.kernel.name.clone());
    ctx.insert("round_index", summary.round_index.to_string());
    ctx.insert("speedup", format!("{:.3}", summary.speedup));
    ctx.insert(
        "measurement_delta",
        format!(
            "trimmed mean {} ns -> {} ns",
            summary.baseline_mean_ns, summary.winner_mean_ns
        ),
    );
    ctx.insert("source_diff", diff);
    let prompt = match prompts.render(Stage::SummarizePatterns, &ctx) {
        Ok(p) => p,
        Err(e) => {
            warn!("pattern summary prompt failed to render: {e}");
            return Vec::new();
        }
    };
    let request = LlmRequest {
        stage: Stage::SummarizePatterns,
        prompt,
        round_index: summary.round_index,
        candidate_index: Some(summary.winner_index),
        attempt: 0,
        temperature_hint: 0.0,
    };
    let response = match invoke(backend, &request) {
        Ok(r) => r,
        Err(e) => {
            warn!("pattern summary skipped: {e}");
            return Vec::new();
        }
    };
    let items = match parse_summary(&response) {
        Ok(items) => items,
        Err(e) => {
            warn!("pattern summary unparseable, skipped: {e}");
            return Vec::new();
        }
    };
    let mut ids = Vec::new();
    for (category, description, hint) in items {
        match store.record(
            category,
            &description,
            &hint,
            &summary.kernel.name,
            summary.round_index,
            summary.speedup,
            epsilon,
        ) {
            Ok(id) => {
                info!("pattern [{}] {description}", category.as_str());
                ids.push(id);
            }
            Err(e) => warn!("pattern not recorded: {e}"),
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Dialect;
    use crate::llm::MockBackend;
    use proptest::prelude::*;

    fn store_with(speedups: &[f64]) -> PatternStore {
        let mut s = PatternStore::default();
        for (i, &sp) in speedups.iter().enumerate() {
            s.record(
                PatternCategory::Other,
                &format!("p{i}"),
                "h",
                "k",
                0,
                sp,
                0.01,
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn top_patterns_orders_by_best_speedup() {
        let s = store_with(&[1.2, 3.0, 1.5]);
        let top = s.top_patterns(2);
        assert_eq!(
            top.iter()
                .map(|p| p.description.as_str())
                .collect::<Vec<_>>(),
            ["p1", "p2"]
        );
        assert!(s.top_patterns(0).is_empty());
        assert!(PatternStore::default().top_patterns(5).is_empty());
    }

    #[test]
    fn ties_go_to_most_recent() {
        let mut s = store_with(&[2.0, 2.0]);
        assert_eq!(s.top_patterns(1)[0].description, "p1");
        s.record(PatternCategory::Other, "p0", "h", "k", 3, 1.5, 0.01)
            .unwrap();
        assert_eq!(s.top_patterns(1)[0].description, "p0");
    }

    #[test]
    fn same_description_merges_evidence() {
        let mut s = PatternStore::default();
        let a = s
            .record(
                PatternCategory::Tiling,
                "Tile the  loop in shared memory.",
                "h",
                "k",
                0,
                2.0,
                0.01,
            )
            .unwrap();
        let b = s
            .record(
                PatternCategory::Tiling,
                "tile the loop in shared memory",
                "h",
                "k",
                1,
                1.5,
                0.01,
            )
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(s.len(), 1);
        assert_eq!(s.patterns[0].evidence.len(), 2);
    }

    #[test]
    fn weak_evidence_is_rejected() {
        let mut s = PatternStore::default();
        assert!(s
            .record(PatternCategory::Other, "x", "h", "k", 0, 1.005, 0.01)
            .is_err());
        assert!(s.is_empty());
    }

    #[test]
    fn round_trips_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patterns.json");
        let s = store_with(&[1.25, 7.0 / 3.0]);
        s.save(&path).unwrap();
        assert_eq!(PatternStore::load(&path).unwrap(), s);
        assert_eq!(
            PatternStore::load(&dir.path().join("none.json")).unwrap(),
            PatternStore::default()
        );
    }

    fn summary_fixture<'a>(kernel: &'a KernelSource, speedup: f64) -> WinnerSummary<'a> {
        WinnerSummary {
            kernel,
            round_index: 2,
            winner_index: 1,
            baseline_source: "for i in n: y[i] = x[i]\n",
            winner_source: "tile(32)\nfor i in n: y[i] = x[i]\n",
            baseline_mean_ns: 2_000,
            winner_mean_ns: 1_000,
            speedup,
        }
    }

    #[test]
    fn extraction_parses_scripted_summary() {
        let dir = tempfile::tempdir().unwrap();
        let stage = dir.path().join("summarize_patterns");
        fs::create_dir_all(&stage).unwrap();
        fs::write(
            stage.join("r2_c1.md"),
            "```json\n[{\"category\":\"Tiling\",\"description\":\"Shared-memory tiling of the inner loop\",\"hint\":\"Tile with 32x32 shared blocks\"}]\n```\n",
        )
        .unwrap();
        let mock = MockBackend::new(dir.path());
        let kernel = KernelSource::new("saxpy", "x", Dialect::CToy, "saxpy").unwrap();
        let mut store = PatternStore::default();
        let ids = extract_patterns(
            &mut store,
            &summary_fixture(&kernel, 2.0),
            0.01,
            &mock,
            &PromptSet::default(),
        );
        assert_eq!(ids.len(), 1);
        let rec = &store.patterns[0];
        assert_eq!(rec.category, PatternCategory::Tiling);
        assert_eq!(rec.evidence.len(), 1);
        assert_eq!(
            (
                rec.evidence[0].kernel_name.as_str(),
                rec.evidence[0].round_index,
                rec.evidence[0].speedup
            ),
            ("saxpy", 2, 2.0)
        );
        let prompt = &mock.calls()[0].prompt;
        assert!(prompt.contains("+tile(32)"), "{prompt}");

        // Same summary again merges into the same record.
        extract_patterns(
            &mut store,
            &summary_fixture(&kernel, 1.5),
            0.01,
            &mock,
            &PromptSet::default(),
        );
        assert_eq!(store.len(), 1);
        assert_eq!(store.patterns[0].evidence.len(), 2);
    }

    #[test]
    fn extraction_gate_and_failures_leave_store_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockBackend::new(dir.path());
        let kernel = KernelSource::new("saxpy", "x", Dialect::CToy, "saxpy").unwrap();
        let mut store = PatternStore::default();
        assert!(extract_patterns(
            &mut store,
            &summary_fixture(&kernel, 1.005),
            0.01,
            &mock,
            &PromptSet::default()
        )
        .is_empty());
        assert!(mock.calls().is_empty());
        // Missing script: logged and skipped.
        assert!(extract_patterns(
            &mut store,
            &summary_fixture(&kernel, 2.0),
            0.01,
            &mock,
            &PromptSet::default()
        )
        .is_empty());
        assert!(store.is_empty());
    }

    #[test]
    fn unknown_categories_map_to_other() {
        let r = LlmResponse::from_raw(
            "```json\n{\"category\":\"vectorize\",\"description\":\"d\"}\n```",
        );
        assert_eq!(
            parse_summary(&r).unwrap(),
            vec![(PatternCategory::Other, "d".into(), "d".into())]
        );
    }

    proptest! {
        #[test]
        fn top_is_ordered_subset(speedups in proptest::collection::vec(1.02f64..10.0, 0..20), m in 0usize..25) {
            let s = store_with(&speedups);
            let top = s.top_patterns(m);
            prop_assert_eq!(top.len(), m.min(s.len()));
            for p in &top {
                prop_assert!(s.patterns.contains(p));
            }
            for w in top.windows(2) {
                prop_assert!(w[0].max_speedup() >= w[1].max_speedup());
                if w[0].max_speedup() == w[1].max_speedup() {
                    prop_assert!(w[0].latest_seq() > w[1].latest_seq());
                }
            }
            // Nothing left out beats the last included record.
            if let Some(last) = top.last() {
                for p in s.patterns.iter().filter(|p| !top.contains(p)) {
                    prop_assert!(p.max_speedup() <= last.max_speedup());
                }
            }
        }
    }
}
