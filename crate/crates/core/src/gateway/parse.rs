//! Recovering the structured knowledge object from free-form model output.
//!
//! The default extractor scans for balanced braces while skipping string
//! literals and escapes. `Greedy` reproduces the first-`{`-to-last-`}` match
//! for comparison with older results.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{validate_knowledge, GeneratedKnowledge, ParseError, ParseErrorKind};

pub const NO_JSON_MESSAGE: &str = "No JSON object found";

const EXCERPT_CHARS: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    #[default]
    Balanced,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoJson;

impl std::fmt::Display for NoJson {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(NO_JSON_MESSAGE)
    }
}

impl std::error::Error for NoJson {}

/// End (exclusive) of the object opening at `start`, if it closes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First complete top-level object in `raw`.
///
/// Balanced objects that are not valid JSON (for example brace-wrapped prose
/// ahead of the payload) are skipped in favour of a later valid one; if none
/// parses, the first balanced object is returned so the caller reports it as
/// malformed.
pub fn extract_json_block(raw: &str) -> Result<&str, NoJson> {
    extract_json_block_with(raw, ExtractMode::Balanced)
}

pub fn extract_json_block_with(raw: &str, mode: ExtractMode) -> Result<&str, NoJson> {
    match mode {
        ExtractMode::Greedy => {
            let start = raw.find('{').ok_or(NoJson)?;
            let end = raw.rfind('}').filter(|&e| e > start).ok_or(NoJson)?;
            Ok(&raw[start..=end])
        }
        ExtractMode::Balanced => {
            let bytes = raw.as_bytes();
            let mut first: Option<&str> = None;
            let mut pos = 0;
            while let Some(off) = raw[pos..].find('{') {
                let start = pos + off;
                match balanced_end(bytes, start) {
                    Some(end) => {
                        let candidate = &raw[start..end];
                        if serde_json::from_str::<Value>(candidate).is_ok() {
                            return Ok(candidate);
                        }
                        first.get_or_insert(candidate);
                        pos = end;
                    }
                    None => pos = start + 1,
                }
            }
            first.ok_or(NoJson)
        }
    }
}

fn excerpt(raw: &str) -> String {
    raw.chars().take(EXCERPT_CHARS).collect()
}

pub fn parse_knowledge(raw: &str) -> Result<GeneratedKnowledge, ParseError> {
    parse_knowledge_with(raw, ExtractMode::Balanced)
}

/// Extraction, JSON parsing and schema validation, each mapped to its own
/// [`ParseErrorKind`]. Never panics.
pub fn parse_knowledge_with(raw: &str, mode: ExtractMode) -> Result<GeneratedKnowledge, ParseError> {
    let block = extract_json_block_with(raw, mode).map_err(|_| ParseError {
        kind: ParseErrorKind::NoJson,
        message: format!("{NO_JSON_MESSAGE} in response"),
        raw_excerpt: excerpt(raw),
    })?;
    let value: Value = serde_json::from_str(block).map_err(|e| ParseError {
        kind: ParseErrorKind::Malformed,
        message: format!("Failed to parse JSON: {e}"),
        raw_excerpt: excerpt(block),
    })?;
    validate_knowledge(&value).map_err(|v| ParseError {
        kind: ParseErrorKind::SchemaViolation,
        message: v.to_string(),
        raw_excerpt: excerpt(block),
    })
}
