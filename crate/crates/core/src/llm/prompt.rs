//! Prompt templates: one text file per stage with `{name}` placeholders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{LlmError, Stage};
use crate::domain::PatternRecord;

/// Shown instead of an empty pattern list.
pub const NO_PATTERNS_MARKER: &str = "(no inherited patterns)";

const DEFAULT_BUILD_MEP: &str = include_str!("../../prompts/build_mep.txt");
const DEFAULT_GENERATE: &str = include_str!("../../prompts/generate_candidates.txt");
const DEFAULT_REPAIR: &str = include_str!("../../prompts/repair.txt");
const DEFAULT_SUMMARIZE: &str = include_str!("../../prompts/summarize_patterns.txt");

/// Placeholder context for rendering.
pub type PromptContext = BTreeMap<&'static str, String>;

/// Substitutes every `{name}` (lowercase letters and underscores) with its
/// value. Values are inserted verbatim and never re-scanned; any other brace
/// text is literal.
pub fn render_prompt(template: &str, context: &PromptContext) -> Result<String, LlmError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let name_len = after
            .bytes()
            .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
            .count();
        if name_len > 0 && after.as_bytes().get(name_len) == Some(&b'}') {
            let key = &after[..name_len];
            let value = context
                .get(key)
                .ok_or_else(|| LlmError::MissingPlaceholder(key.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names used by a template.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        let n = after
            .bytes()
            .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
            .count();
        if n > 0 && after.as_bytes().get(n) == Some(&b'}') {
            let name = after[..n].to_string();
            if !names.contains(&name) {
                names.push(name);
            }
        }
        rest = after;
    }
    names
}

/// Renders a pattern list for the generation prompt.
pub fn render_patterns(patterns: &[PatternRecord]) -> String {
    if patterns.is_empty() {
        return NO_PATTERNS_MARKER.to_string();
    }
    patterns
        .iter()
        .map(|p| {
            format!(
                "- [{}] {} (best observed speedup {:.2}x)",
                p.category.as_str(),
                p.hint_text.trim(),
                p.max_speedup()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Templates for all stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<Stage, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let templates = Stage::ALL
            .into_iter()
            .map(|s| (s, default_template(s).to_string()))
            .collect();
        PromptSet { templates }
    }
}

pub fn default_template(stage: Stage) -> &'static str {
    match stage {
        Stage::BuildMep => DEFAULT_BUILD_MEP,
        Stage::GenerateCandidates => DEFAULT_GENERATE,
        Stage::Repair => DEFAULT_REPAIR,
        Stage::SummarizePatterns => DEFAULT_SUMMARIZE,
    }
}

impl PromptSet {
    /// Loads `<dir>/<stage>.txt` for each stage, falling back to the built-in
    /// template when a file is absent.
    pub fn load(dir: &Path) -> Result<Self, LlmError> {
        let mut set = PromptSet::default();
        for stage in Stage::ALL {
            let path = dir.join(format!("{}.txt", stage.as_str()));
            match fs::read_to_string(&path) {
                Ok(text) => {
                    set.templates.insert(stage, text);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(LlmError::Io { path, source }),
            }
        }
        Ok(set)
    }

    pub fn template(&self, stage: Stage) -> Result<&str, LlmError> {
        self.templates
            .get(&stage)
            .map(String::as_str)
            .ok_or(LlmError::MissingTemplate(stage))
    }

    pub fn render(&self, stage: Stage, context: &PromptContext) -> Result<String, LlmError> {
        render_prompt(self.template(stage)?, context)
    }

    /// Writes the templates as `<dir>/<stage>.txt`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (stage, text) in &self.templates {
            fs::write(dir.join(format!("{}.txt", stage.as_str())), text)?;
        }
        Ok(())
    }
}
