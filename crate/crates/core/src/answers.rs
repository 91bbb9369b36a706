//! Final-answer extraction, normalization, comparison, and majority voting.
//!
//! Answers are graded deterministically: multiple-choice letters compare
//! case-insensitively, integers compare numerically, free text compares
//! exactly after trimming and lowercasing. No fuzzy or model-based matching.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Expected answer shape for a problem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerKind {
    /// Carries the valid option letters (stored uppercase).
    MultipleChoice { options: Vec<char> },
    Integer,
    FreeText,
}

impl AnswerKind {
    pub fn multiple_choice(options: &str) -> Self {
        Self::MultipleChoice {
            options: options.chars().map(|c| c.to_ascii_uppercase()).collect(),
        }
    }

    /// Same variant, ignoring option sets.
    pub fn same_shape(&self, other: &AnswerKind) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

/// A canonical answer value: uppercased letter, decimal integer string, or
/// trimmed lowercase text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub kind: AnswerKind,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ExtractError {
    #[error("no answer found in text")]
    NoAnswerFound,
    #[error("extracted {raw:?} is not valid for the expected answer kind")]
    InvalidForKind { raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("answer kinds do not match")]
pub struct KindMismatch;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("majority vote over an empty list")]
pub struct EmptyInput;

/// Content of the last well-formed `\boxed{...}` expression, if any.
/// Braces inside the box may nest.
pub fn last_boxed(text: &str) -> Option<&str> {
    const MARKER: &str = "\\boxed{";
    let starts: Vec<usize> = text
        .match_indices(MARKER)
        .map(|(i, _)| i + MARKER.len())
        .collect();
    for &start in starts.iter().rev() {
        let mut depth = 1usize;
        for (off, ch) in text[start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..start + off]);
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Peels formatting wrappers: whitespace, dollar signs, outer braces, and
/// argument-style commands like `\text{...}`.
fn strip_wrappers(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    loop {
        let before = s.clone();
        s = s.trim().trim_matches('$').trim().to_string();
        for cmd in ["\\text", "\\textbf", "\\mathrm", "\\mathbf"] {
            if let Some(rest) = s.strip_prefix(cmd) {
                let rest = rest.trim_start();
                if let Some(inner) = rest.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                    s = inner.to_string();
                }
            }
        }
        if s.len() >= 2 && s.starts_with('{') && s.ends_with('}') {
            s = s[1..s.len() - 1].to_string();
        }
        if s == before {
            break;
        }
    }
    s
}

/// Canonicalizes a raw answer string for the given kind. Idempotent: feeding
/// a normalized value back through is a no-op.
pub fn normalize_value(raw: &str, kind: &AnswerKind) -> Result<NormalizedAnswer, ExtractError> {
    let stripped = strip_wrappers(raw);
    if stripped.is_empty() {
        return Err(ExtractError::NoAnswerFound);
    }
    let value = match kind {
        AnswerKind::MultipleChoice { options } => {
            let candidate = stripped.trim_end_matches('.').trim();
            let mut chars = candidate.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => {
                    let letter = c.to_ascii_uppercase();
                    if !options.contains(&letter) {
                        return Err(ExtractError::InvalidForKind { raw: stripped });
                    }
                    letter.to_string()
                }
                _ => return Err(ExtractError::InvalidForKind { raw: stripped }),
            }
        }
        AnswerKind::Integer => {
            let cleaned: String = stripped
                .chars()
                .filter(|c| !c.is_whitespace() && *c != ',')
                .collect();
            let n: i128 = cleaned
                .parse()
                .map_err(|_| ExtractError::InvalidForKind { raw: stripped })?;
            n.to_string()
        }
        AnswerKind::FreeText => stripped.trim().to_lowercase(),
    };
    Ok(NormalizedAnswer {
        kind: kind.clone(),
        value,
    })
}

/// Finds the answer in a full solution or an answer-tag body.
///
/// The last boxed expression wins; when none exists the whole text is treated
/// as the answer candidate.
pub fn extract_final_answer(
    text: &str,
    kind: &AnswerKind,
) -> Result<NormalizedAnswer, ExtractError> {
    let candidate = match last_boxed(text) {
        Some(inner) => inner,
        None => text,
    };
    normalize_value(candidate, kind)
}

/// Answer extraction for a whole solution text under a trace schema: the
/// last boxed expression wins, then the answer tag body, then the text as a
/// whole.
pub fn extract_answer_in_solution(
    text: &str,
    schema: &crate::trace::TraceSchema,
    kind: &AnswerKind,
) -> Result<NormalizedAnswer, ExtractError> {
    if let Some(inner) = last_boxed(text) {
        return normalize_value(inner, kind);
    }
    if let Some(open) = crate::trace::find_ascii_ci(text, &schema.answer_open, 0) {
        let body_start = open + schema.answer_open.len();
        if let Some(close) = crate::trace::find_ascii_ci(text, &schema.answer_close, body_start) {
            return extract_final_answer(&text[body_start..close], kind);
        }
    }
    extract_final_answer(text, kind)
}

/// Grades a prediction against the gold answer. Kinds must agree in shape.
pub fn is_correct(
    predicted: &NormalizedAnswer,
    gold: &NormalizedAnswer,
) -> Result<bool, KindMismatch> {
    if !predicted.kind.same_shape(&gold.kind) {
        return Err(KindMismatch);
    }
    Ok(match &gold.kind {
        AnswerKind::MultipleChoice { .. } => {
            predicted.value.eq_ignore_ascii_case(&gold.value)
        }
        AnswerKind::Integer => {
            match (predicted.value.parse::<i128>(), gold.value.parse::<i128>()) {
                (Ok(a), Ok(b)) => a == b,
                _ => predicted.value == gold.value,
            }
        }
        AnswerKind::FreeText => predicted.value.trim().to_lowercase() == gold.value.trim().to_lowercase(),
    })
}

/// Modal answer; ties break to the value seen earliest in the list.
pub fn majority_vote(answers: &[NormalizedAnswer]) -> Result<NormalizedAnswer, EmptyInput> {
    if answers.is_empty() {
        return Err(EmptyInput);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in answers {
        *counts.entry(a.value.as_str()).or_insert(0) += 1;
    }
    // scanning in list order with strict-greater replacement makes the
    // earliest-seen value win among equal counts
    let mut best: (&NormalizedAnswer, usize) = (&answers[0], counts[answers[0].value.as_str()]);
    for a in &answers[1..] {
        let count = counts[a.value.as_str()];
        if count > best.1 {
            best = (a, count);
        }
    }
    Ok(best.0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mc() -> AnswerKind {
        AnswerKind::multiple_choice("ABCD")
    }

    fn ans(kind: &AnswerKind, value: &str) -> NormalizedAnswer {
        NormalizedAnswer {
            kind: kind.clone(),
            value: value.to_string(),
        }
    }

    #[test]
    fn extracts_boxed_integer() {
        let text = "The maximum capacity is explicitly labeled.\nFinal Answer:\\boxed{1000}";
        let got = extract_final_answer(text, &AnswerKind::Integer).unwrap();
        assert_eq!(got.value, "1000");
    }

    #[test]
    fn extracts_boxed_letter() {
        let got = extract_final_answer("Final Answer:\\boxed{B}", &mc()).unwrap();
        assert_eq!(got.value, "B");
    }

    #[test]
    fn lowercase_letter_is_uppercased() {
        let got = extract_final_answer("\\boxed{c}", &mc()).unwrap();
        assert_eq!(got.value, "C");
    }

    #[test]
    fn last_boxed_occurrence_wins() {
        let text = "first \\boxed{C} then revised \\boxed{B} end";
        // scanning oracle: the rightmost marker position
        let oracle = text.rfind("\\boxed{").unwrap();
        assert!(oracle > text.find("\\boxed{").unwrap());
        let got = extract_final_answer(text, &mc()).unwrap();
        assert_eq!(got.value, "B");
    }

    #[test]
    fn falls_back_to_whole_text_without_box() {
        let got = extract_final_answer("  b \n", &mc()).unwrap();
        assert_eq!(got.value, "B");
        assert_eq!(
            extract_final_answer("   ", &mc()),
            Err(ExtractError::NoAnswerFound)
        );
    }

    #[test]
    fn wrappers_are_stripped() {
        let got = extract_final_answer("<ans>$\\boxed{\\text{42}}$</ans>", &AnswerKind::Integer).unwrap();
        assert_eq!(got.value, "42");
        let got = extract_final_answer("$\\boxed{\\text{B}}$", &mc()).unwrap();
        assert_eq!(got.value, "B");
    }

    #[test]
    fn solution_extraction_prefers_box_then_tag() {
        let schema = crate::trace::TraceSchema::perception_reasoning();
        // boxed beats the tag
        let text = "<correct_answer>A</correct_answer> but actually \\boxed{B}";
        assert_eq!(extract_answer_in_solution(text, &schema, &mc()).unwrap().value, "B");
        // unboxed tag content still grades
        let text = "prose...\n<correct_answer>\nthe answer is not stated plainly\n</correct_answer>";
        assert!(extract_answer_in_solution(text, &schema, &mc()).is_err());
        let text = "prose...\n<correct_answer>c</correct_answer>\n";
        assert_eq!(extract_answer_in_solution(text, &schema, &mc()).unwrap().value, "C");
        // no box, no tag: the whole text is the candidate
        assert_eq!(extract_answer_in_solution(" d ", &schema, &mc()).unwrap().value, "D");
    }

    #[test]
    fn non_letter_is_invalid_for_multiple_choice() {
        assert!(matches!(
            extract_final_answer("\\boxed{42}", &mc()),
            Err(ExtractError::InvalidForKind { .. })
        ));
        assert!(matches!(
            extract_final_answer("\\boxed{E}", &mc()),
            Err(ExtractError::InvalidForKind { .. })
        ));
    }

    #[test]
    fn integer_equality_is_numeric() {
        // oracle: both sides parse to the same integer
        assert_eq!("040".parse::<i128>().unwrap(), "40".parse::<i128>().unwrap());
        let a = normalize_value("040", &AnswerKind::Integer).unwrap();
        let b = normalize_value("40", &AnswerKind::Integer).unwrap();
        assert_eq!(a.value, "40");
        assert!(is_correct(&a, &b).unwrap());
        assert!(is_correct(
            &ans(&AnswerKind::Integer, "1000"),
            &ans(&AnswerKind::Integer, "1000")
        )
        .unwrap());
    }

    #[test]
    fn multiple_choice_compare_ignores_case() {
        assert!(is_correct(&ans(&mc(), "b"), &ans(&mc(), "B")).unwrap());
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        assert!(is_correct(&ans(&mc(), "B"), &ans(&AnswerKind::Integer, "2")).is_err());
    }

    #[test]
    fn majority_vote_basic_and_ties() {
        let kind = mc();
        let a = ans(&kind, "A");
        let b = ans(&kind, "B");
        let c = ans(&kind, "C");
        assert_eq!(majority_vote(&[a.clone(), a.clone(), b.clone()]).unwrap().value, "A");
        assert_eq!(majority_vote(&[a.clone(), b.clone()]).unwrap().value, "A");
        // frequency oracle: C and B tie at 2, C occurs first
        let list = [c.clone(), b.clone(), b.clone(), c.clone(), a.clone()];
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for x in &list {
            *counts.entry(x.value.as_str()).or_insert(0) += 1;
        }
        assert_eq!(counts["C"], 2);
        assert_eq!(counts["B"], 2);
        assert_eq!(majority_vote(&list).unwrap().value, "C");
        assert!(majority_vote(&[]).is_err());
    }

    proptest! {
        #[test]
        fn majority_winner_is_modal_and_earliest(values in proptest::collection::vec(0u8..4, 1..40)) {
            let kind = mc();
            let letters = ['A', 'B', 'C', 'D'];
            let list: Vec<NormalizedAnswer> =
                values.iter().map(|&v| ans(&kind, &letters[v as usize].to_string())).collect();
            let winner = majority_vote(&list).unwrap();
            let mut counts: HashMap<String, usize> = HashMap::new();
            for a in &list {
                *counts.entry(a.value.clone()).or_insert(0) += 1;
            }
            let max = counts.values().copied().max().unwrap();
            prop_assert_eq!(counts[&winner.value], max);
            // no maximal value occurs before the winner's first occurrence
            let first_of = |v: &str| list.iter().position(|a| a.value == v).unwrap();
            for (value, count) in &counts {
                if *count == max {
                    prop_assert!(first_of(&winner.value) <= first_of(value));
                }
            }
        }

        #[test]
        fn normalization_is_idempotent(raw in "[ a-zA-Z0-9,$.{}-]{0,24}") {
            for kind in [mc(), AnswerKind::Integer, AnswerKind::FreeText] {
                if let Ok(once) = normalize_value(&raw, &kind) {
                    let twice = normalize_value(&once.value, &kind).unwrap();
                    prop_assert_eq!(once.value, twice.value);
                }
            }
        }
    }
}
