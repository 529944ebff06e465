//! Final-answer extraction and comparison.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum AnswerRule {
    /// Contents of the last `\boxed{...}`.
    Boxed,
    /// Text after the last occurrence of `marker`, up to the end of its line.
    Marker { marker: String },
    /// `\boxed{}` when present, else the marker.
    BoxedOrMarker { marker: String },
}

impl Default for AnswerRule {
    fn default() -> Self {
        AnswerRule::BoxedOrMarker { marker: "Answer:".into() }
    }
}

impl AnswerRule {
    pub fn extract(&self, text: &str) -> Option<String> {
        let raw = match self {
            AnswerRule::Boxed => last_boxed(text),
            AnswerRule::Marker { marker } => after_marker(text, marker),
            AnswerRule::BoxedOrMarker { marker } => last_boxed(text).or_else(|| after_marker(text, marker)),
        }?;
        let n = normalize(&raw);
        (!n.is_empty()).then_some(n)
    }
}

/// Collapses runs of whitespace and trims.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn last_boxed(text: &str) -> Option<String> {
    let start = text.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

fn after_marker(text: &str, marker: &str) -> Option<String> {
    if marker.is_empty() {
        return None;
    }
    let start = text.rfind(marker)? + marker.len();
    let line = text[start..].lines().next().unwrap_or("");
    Some(line.trim().trim_end_matches('.').to_string())
}

/// Exact match after whitespace normalization.
pub fn matches(extracted: &str, gold: &str) -> bool {
    normalize(extracted) == normalize(gold)
}
