//! Prompt corpora: JSON lines of `{"prompt": ..., "answer": ...}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub expected_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_correct: Option<bool>,
}

impl PromptRecord {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            expected_answer: None,
            model_correct: None,
        }
    }

    pub fn with_answer(prompt: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            expected_answer: Some(answer.into()),
            ..Self::new(prompt)
        }
    }
}

/// 100 short factual prompts with one-word answers.
pub const BUNDLED: &str = include_str!("../data/facts_100.jsonl");

/// Name accepted in place of a path to select [`BUNDLED`].
pub const BUNDLED_NAME: &str = "bundled";

/// Parses JSON lines; blank lines are skipped. `origin` names the source
/// in error messages.
pub fn parse_jsonl(raw: &str, origin: &Path) -> Result<Vec<PromptRecord>> {
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PromptRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if record.prompt.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                message: format!("line {}: empty prompt", i + 1),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn bundled() -> Vec<PromptRecord> {
    parse_jsonl(BUNDLED, Path::new(BUNDLED_NAME)).expect("bundled corpus is well formed")
}

/// Loads a corpus file, or the bundled one when `path` is `"bundled"`.
pub fn load_corpus(path: &Path) -> Result<Vec<PromptRecord>> {
    if path.as_os_str() == BUNDLED_NAME {
        return Ok(bundled());
    }
    let raw = std::fs::read_to_string(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&raw, path)
}
