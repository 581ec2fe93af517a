//! Boxed-answer extraction and the binary exact-match reward.
//!
//! A response is scored by pulling the content of its last `\boxed{...}`
//! and comparing it, after light canonicalization, with the ground truth.
//! Ground truths equal to [`ABSTAIN`] are satisfied either by a boxed
//! sentinel or by an unboxed refusal phrase.

use serde::{Deserialize, Serialize};

/// Ground-truth marker for questions that cannot be answered without their evidence.
pub const ABSTAIN: &str = "<ABSTAIN>";

/// Separator for ground truths that accept several answers (`"2||7||12"`).
pub const ANSWER_SEPARATOR: &str = "||";

/// Phrases that count as abstaining when a response carries no box.
pub const REFUSAL_PHRASES: &[&str] = &[
    "cannot be determined",
    "cannot determine",
    "cannot answer",
    "cannot tell",
    "not enough information",
    "insufficient information",
    "unable to determine",
];

const BOX_OPEN: &str = "\\boxed{";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Match,
    Mismatch,
    NoBox,
    AbstainMatch,
    AbstainMismatch,
}

impl VerdictReason {
    pub fn is_rewarded(self) -> bool {
        matches!(self, VerdictReason::Match | VerdictReason::AbstainMatch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub extracted: Option<String>,
    pub reward: u8,
    pub reason: VerdictReason,
}

impl Verdict {
    fn new(extracted: Option<String>, reason: VerdictReason) -> Self {
        Self {
            extracted,
            reward: u8::from(reason.is_rewarded()),
            reason,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.reward == 1
    }
}

/// Returns the trimmed content of the last `\boxed{...}` in `text`.
///
/// Only the last opening is considered; if its braces never balance the
/// result is `None` even when an earlier box is well formed.
pub fn extract_boxed(text: &str) -> Option<String> {
    let start = text.rfind(BOX_OPEN)? + BOX_OPEN.len();
    let mut depth = 1usize;
    for (offset, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + offset].trim().to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Canonical form used for answer comparison: trimmed, inner whitespace
/// collapsed, leading zeros of plain integers stripped, lowercased.
pub fn normalize(answer: &str) -> String {
    let collapsed = answer.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = if !collapsed.is_empty() && collapsed.bytes().all(|b| b.is_ascii_digit()) {
        let trimmed = collapsed.trim_start_matches('0');
        if trimmed.is_empty() {
            "0".to_string()
        } else {
            trimmed.to_string()
        }
    } else {
        collapsed
    };
    stripped.to_lowercase()
}

pub fn is_abstain(answer: &str) -> bool {
    normalize(answer) == normalize(ABSTAIN)
}

pub fn is_refusal(text: &str) -> bool {
    let folded = text.to_lowercase();
    REFUSAL_PHRASES.iter().any(|p| folded.contains(p))
}

/// Splits a ground truth into its accepted alternatives.
pub fn accepted_answers(ground_truth: &str) -> impl Iterator<Item = &str> {
    ground_truth.split(ANSWER_SEPARATOR).map(str::trim)
}

/// Scores `response` against `ground_truth` with the exact-match rule.
pub fn verify(response: &str, ground_truth: &str) -> Verdict {
    let extracted = extract_boxed(response);
    if is_abstain(ground_truth) {
        return match extracted {
            Some(ans) if is_abstain(&ans) => Verdict::new(Some(ans), VerdictReason::AbstainMatch),
            Some(ans) => Verdict::new(Some(ans), VerdictReason::AbstainMismatch),
            None if is_refusal(response) => Verdict::new(None, VerdictReason::AbstainMatch),
            None => Verdict::new(None, VerdictReason::NoBox),
        };
    }
    match extracted {
        None => Verdict::new(None, VerdictReason::NoBox),
        Some(ans) if is_abstain(&ans) => Verdict::new(Some(ans), VerdictReason::AbstainMismatch),
        Some(ans) => {
            let got = normalize(&ans);
            let reason = if accepted_answers(ground_truth).any(|gt| normalize(gt) == got) {
                VerdictReason::Match
            } else {
                VerdictReason::Mismatch
            };
            Verdict::new(Some(ans), reason)
        }
    }
}
