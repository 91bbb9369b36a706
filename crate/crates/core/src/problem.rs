//! Problem records: an image-grounded question plus its answer key.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answers::{AnswerKind, NormalizedAnswer};

/// Wire tag for the answer kind in problem files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKindTag {
    MultipleChoice,
    Integer,
    FreeText,
}

/// One benchmark/problem-set entry, as read from the problems JSONL file:
/// `{id, source, image_ref, question, options?, answer, answer_kind}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer: String,
    pub answer_kind: AnswerKindTag,
    /// Pre-existing solution texts; when present the rollout-label stage
    /// skips generation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solutions: Vec<String>,
    /// Ground-truth perception description, required by mutate-perception.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perception: Option<String>,
}

impl Problem {
    /// Full answer kind, with option letters derived from the option list
    /// (A, B, C, ... by position).
    pub fn answer_kind(&self) -> AnswerKind {
        match self.answer_kind {
            AnswerKindTag::MultipleChoice => {
                let count = self.options.as_ref().map(|o| o.len()).unwrap_or(4).max(1);
                let letters: String = (0..count.min(26))
                    .map(|i| (b'A' + i as u8) as char)
                    .collect();
                AnswerKind::multiple_choice(&letters)
            }
            AnswerKindTag::Integer => AnswerKind::Integer,
            AnswerKindTag::FreeText => AnswerKind::FreeText,
        }
    }

    /// The gold answer in normalized form.
    pub fn gold(&self) -> Result<NormalizedAnswer, ProblemError> {
        crate::answers::normalize_value(&self.answer, &self.answer_kind()).map_err(|e| {
            ProblemError::BadAnswerKey {
                id: self.id.clone(),
                reason: e.to_string(),
            }
        })
    }

    /// Option list rendered as `(A) text (B) text ...` for prompts.
    pub fn options_text(&self) -> String {
        match &self.options {
            Some(opts) => opts
                .iter()
                .enumerate()
                .map(|(i, o)| format!("({}) {}", (b'A' + i as u8) as char, o))
                .collect::<Vec<_>>()
                .join(" "),
            None => String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("problem {id}: answer key does not normalize: {reason}")]
    BadAnswerKey { id: String, reason: String },
    #[error("duplicate problem id {0}")]
    DuplicateId(String),
}

/// Reads a problems JSONL stream, rejecting duplicate ids.
pub fn read_problems<R: Read>(reader: R) -> Result<Vec<Problem>, ProblemError> {
    let mut problems: Vec<Problem> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem =
            serde_json::from_str(&line).map_err(|source| ProblemError::Parse {
                line: i + 1,
                source,
            })?;
        if !seen.insert(problem.id.clone()) {
            return Err(ProblemError::DuplicateId(problem.id));
        }
        problems.push(problem);
    }
    Ok(problems)
}

pub fn read_problems_file(path: &Path) -> Result<Vec<Problem>, ProblemError> {
    read_problems(std::fs::File::open(path)?)
}
