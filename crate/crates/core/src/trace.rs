//! Structured perception/reasoning trace format: parsing, canonical rendering,
//! and prefix extraction.
//!
//! Solutions are expected to contain a perception section and a reasoning
//! section, each holding numbered `<step_k>` tags, followed by a final answer
//! tag. Header spellings and tag shapes vary per source dataset, so both are
//! carried in a [`TraceSchema`]. Prose between recognized tags is ignored;
//! structural violations (skipped indices, unclosed tags, missing answer) are
//! rejected rather than repaired.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which section of the solution a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Perception,
    Reasoning,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Perception => write!(f, "perception"),
            Phase::Reasoning => write!(f, "reasoning"),
        }
    }
}

/// A single solution step. `index` is 1-based within its phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub phase: Phase,
    pub index: usize,
    pub text: String,
}

impl Step {
    /// Builds a step, trimming the body. Returns `None` for blank bodies or a
    /// zero index.
    pub fn new(phase: Phase, index: usize, text: &str) -> Option<Self> {
        let text = text.trim();
        if text.is_empty() || index == 0 {
            return None;
        }
        Some(Self {
            phase,
            index,
            text: text.to_string(),
        })
    }
}

/// A parsed solution: perception steps, reasoning steps, and the raw content
/// of the answer tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub perception_steps: Vec<Step>,
    pub reasoning_steps: Vec<Step>,
    pub final_answer_text: String,
}

impl Trace {
    /// Validates step phases, consecutive 1-based indices per phase, and a
    /// non-zero total step count.
    pub fn new(
        perception_steps: Vec<Step>,
        reasoning_steps: Vec<Step>,
        final_answer_text: String,
    ) -> Result<Self, String> {
        for (i, s) in perception_steps.iter().enumerate() {
            if s.phase != Phase::Perception || s.index != i + 1 {
                return Err(format!("perception step {} out of order", s.index));
            }
            if s.text.trim().is_empty() {
                return Err("blank perception step".into());
            }
        }
        for (i, s) in reasoning_steps.iter().enumerate() {
            if s.phase != Phase::Reasoning || s.index != i + 1 {
                return Err(format!("reasoning step {} out of order", s.index));
            }
            if s.text.trim().is_empty() {
                return Err("blank reasoning step".into());
            }
        }
        if perception_steps.is_empty() && reasoning_steps.is_empty() {
            return Err("trace has no steps".into());
        }
        Ok(Self {
            perception_steps,
            reasoning_steps,
            final_answer_text,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.perception_steps.len() + self.reasoning_steps.len()
    }

    /// Steps in canonical order: perception first, then reasoning.
    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.perception_steps.iter().chain(self.reasoning_steps.iter())
    }

    /// Step at a 1-based global index in canonical order.
    pub fn step_at(&self, global_index: usize) -> Option<&Step> {
        if global_index == 0 {
            return None;
        }
        self.steps().nth(global_index - 1)
    }

    /// Phase of the step at a 1-based global index.
    pub fn phase_of(&self, global_index: usize) -> Option<Phase> {
        self.step_at(global_index).map(|s| s.phase)
    }
}

/// Generation stop marker used when eliciting one step at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepBoundary {
    /// Cut at the end of the first closing step tag.
    CloseTag,
    /// Cut at the first blank line.
    BlankLine,
}

/// Describes one source dataset's trace dialect: header spellings, the step
/// tag shape (`{n}` is the numeric index), the answer tag pair, and whether a
/// perception section must be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSchema {
    pub id: String,
    pub perception_headers: Vec<String>,
    pub reasoning_headers: Vec<String>,
    pub step_open: String,
    pub step_close: String,
    pub answer_open: String,
    pub answer_close: String,
    pub perception_required: bool,
    pub step_boundary: StepBoundary,
}

impl TraceSchema {
    /// Dialect with `[Perception]` / `[Reasoning]` headers.
    pub fn perception_reasoning() -> Self {
        Self {
            id: "perception-reasoning".into(),
            perception_headers: vec!["[Perception]".into()],
            reasoning_headers: vec!["[Reasoning]".into()],
            step_open: "<step_{n}>".into(),
            step_close: "</step_{n}>".into(),
            answer_open: "<correct_answer>".into(),
            answer_close: "</correct_answer>".into(),
            perception_required: true,
            step_boundary: StepBoundary::CloseTag,
        }
    }

    /// Dialect with `[Visual Elements]` / `[Analysis and Interpretation]` headers.
    pub fn visual_elements() -> Self {
        Self {
            id: "visual-elements".into(),
            perception_headers: vec!["[Visual Elements]".into()],
            reasoning_headers: vec!["[Analysis and Interpretation]".into()],
            step_open: "<step_{n}>".into(),
            step_close: "</step_{n}>".into(),
            answer_open: "<correct_answer>".into(),
            answer_close: "</correct_answer>".into(),
            perception_required: true,
            step_boundary: StepBoundary::CloseTag,
        }
    }

    /// Same dialect but with an optional perception section, for
    /// reasoning-only traces.
    pub fn with_optional_perception(mut self) -> Self {
        self.perception_required = false;
        self
    }

    /// Checks alias lists are non-empty and mutually disjoint, and that both
    /// step tag templates contain the `{n}` placeholder.
    pub fn validate(&self) -> Result<(), String> {
        if self.perception_headers.is_empty() || self.reasoning_headers.is_empty() {
            return Err("header alias lists must be non-empty".into());
        }
        for p in &self.perception_headers {
            for r in &self.reasoning_headers {
                if p.eq_ignore_ascii_case(r) {
                    return Err(format!("header alias {p:?} appears in both sections"));
                }
            }
        }
        if !self.step_open.contains("{n}") || !self.step_close.contains("{n}") {
            return Err("step tag templates must contain {n}".into());
        }
        Ok(())
    }

    fn step_open_parts(&self) -> (&str, &str) {
        split_template(&self.step_open)
    }

    fn step_close_parts(&self) -> (&str, &str) {
        split_template(&self.step_close)
    }

    pub fn step_open_tag(&self, n: usize) -> String {
        self.step_open.replace("{n}", &n.to_string())
    }

    pub fn step_close_tag(&self, n: usize) -> String {
        self.step_close.replace("{n}", &n.to_string())
    }

    /// Byte range of the first closing step tag (any index) at or after
    /// `from`.
    pub(crate) fn find_step_close(&self, text: &str, from: usize) -> Option<(usize, usize)> {
        let (close_pre, close_post) = self.step_close_parts();
        let mut cursor = from;
        while let Some(pos) = find_ascii_ci(text, close_pre, cursor) {
            let digits_from = pos + close_pre.len();
            match read_index(text, digits_from) {
                Some((_, digits_end)) if text[digits_end..].starts_with(close_post) => {
                    return Some((pos, digits_end + close_post.len()));
                }
                _ => cursor = digits_from,
            }
        }
        None
    }
}

fn split_template(template: &str) -> (&str, &str) {
    match template.split_once("{n}") {
        Some((pre, post)) => (pre, post),
        None => (template, ""),
    }
}

/// Structural parse failure. Offsets are byte positions into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing {section} section header (searched up to byte {offset})")]
    MissingSection { section: String, offset: usize },
    #[error("malformed step tags at byte {offset}: {reason}")]
    MalformedStepTags { offset: usize, reason: String },
    #[error("missing answer tag at byte {offset}: {reason}")]
    MissingAnswer { offset: usize, reason: String },
}

pub(crate) fn find_ascii_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    if needle.is_empty() || from > haystack.len() {
        return None;
    }
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.len() > h.len() {
        return None;
    }
    (from..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn find_header(text: &str, aliases: &[String], from: usize, before: usize) -> Option<(usize, usize)> {
    // earliest alias occurrence in [from, before)
    let mut best: Option<(usize, usize)> = None;
    for alias in aliases {
        if let Some(pos) = find_ascii_ci(text, alias, from) {
            if pos < before && best.map(|(b, _)| pos < b).unwrap_or(true) {
                best = Some((pos, pos + alias.len()));
            }
        }
    }
    best
}

/// Extracts the steps of one section. Tags must be numbered consecutively
/// from 1; anything that is not a well-formed numbered tag is treated as
/// prose and skipped.
fn parse_section(
    text: &str,
    section: &str,
    start: usize,
    end: usize,
    phase: Phase,
    schema: &TraceSchema,
) -> Result<Vec<Step>, ParseError> {
    let (open_pre, open_post) = schema.step_open_parts();
    let (close_pre, close_post) = schema.step_close_parts();
    let mut steps = Vec::new();
    let mut cursor = start;
    let mut expected = 1usize;
    while let Some(tag_pos) = find_ascii_ci(text, open_pre, cursor) {
        if tag_pos >= end {
            break;
        }
        let digits_from = tag_pos + open_pre.len();
        let Some((n, digits_end)) = read_index(text, digits_from) else {
            cursor = digits_from;
            continue;
        };
        if !text[digits_end..].starts_with(open_post) {
            cursor = digits_end;
            continue;
        }
        if n != expected {
            return Err(ParseError::MalformedStepTags {
                offset: tag_pos,
                reason: format!(
                    "{section} section: expected step {expected}, found step {n}"
                ),
            });
        }
        let body_start = digits_end + open_post.len();
        let close_tag = format!("{close_pre}{n}{close_post}");
        let Some(close_pos) = find_ascii_ci(text, &close_tag, body_start) else {
            return Err(ParseError::MalformedStepTags {
                offset: tag_pos,
                reason: format!("{section} section: step {n} is never closed"),
            });
        };
        if close_pos >= end {
            return Err(ParseError::MalformedStepTags {
                offset: tag_pos,
                reason: format!("{section} section: step {n} closes outside its section"),
            });
        }
        let Some(step) = Step::new(phase, n, &text[body_start..close_pos]) else {
            return Err(ParseError::MalformedStepTags {
                offset: body_start,
                reason: format!("{section} section: step {n} has an empty body"),
            });
        };
        steps.push(step);
        expected += 1;
        cursor = close_pos + close_tag.len();
    }
    Ok(steps)
}

fn read_index(text: &str, from: usize) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut end = from;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == from {
        return None;
    }
    text[from..end].parse().ok().map(|n| (n, end))
}

/// Parses arbitrary model output into a [`Trace`] under `schema`.
///
/// Headers match case-insensitively; step tags must be well-nested and
/// consecutively numbered within each section; the answer tag content is kept
/// verbatim. Prose outside recognized tags is ignored.
pub fn parse_trace(raw_text: &str, schema: &TraceSchema) -> Result<Trace, ParseError> {
    let reasoning = find_header(raw_text, &schema.reasoning_headers, 0, raw_text.len());
    let Some((reasoning_pos, reasoning_end)) = reasoning else {
        return Err(ParseError::MissingSection {
            section: "reasoning".into(),
            offset: raw_text.len(),
        });
    };
    let perception = find_header(raw_text, &schema.perception_headers, 0, reasoning_pos);
    if perception.is_none() && schema.perception_required {
        return Err(ParseError::MissingSection {
            section: "perception".into(),
            offset: reasoning_pos,
        });
    }

    let answer_pos = find_ascii_ci(raw_text, &schema.answer_open, reasoning_end);
    let Some(answer_pos) = answer_pos else {
        return Err(ParseError::MissingAnswer {
            offset: raw_text.len(),
            reason: "no answer tag after the reasoning section".into(),
        });
    };
    let answer_body_start = answer_pos + schema.answer_open.len();
    let Some(answer_close) = find_ascii_ci(raw_text, &schema.answer_close, answer_body_start)
    else {
        return Err(ParseError::MissingAnswer {
            offset: answer_pos,
            reason: "answer tag is never closed".into(),
        });
    };
    let final_answer_text = raw_text[answer_body_start..answer_close].to_string();

    let perception_steps = match perception {
        Some((_, header_end)) => parse_section(
            raw_text,
            "perception",
            header_end,
            reasoning_pos,
            Phase::Perception,
            schema,
        )?,
        None => Vec::new(),
    };
    let reasoning_steps = parse_section(
        raw_text,
        "reasoning",
        reasoning_end,
        answer_pos,
        Phase::Reasoning,
        schema,
    )?;

    if perception_steps.is_empty() && reasoning_steps.is_empty() {
        return Err(ParseError::MalformedStepTags {
            offset: reasoning_end,
            reason: "no steps found in either section".into(),
        });
    }

    Trace::new(perception_steps, reasoning_steps, final_answer_text).map_err(|reason| {
        ParseError::MalformedStepTags {
            offset: 0,
            reason,
        }
    })
}

/// Canonical rendering: first header alias of each non-empty section, one
/// step per tag pair, answer content verbatim. `parse_trace(render_trace(t))`
/// reproduces `t`.
pub fn render_trace(trace: &Trace, schema: &TraceSchema) -> String {
    let mut out = String::new();
    if !trace.perception_steps.is_empty() {
        out.push_str(&schema.perception_headers[0]);
        out.push('\n');
        for step in &trace.perception_steps {
            render_step(&mut out, step, schema);
        }
    }
    out.push_str(&schema.reasoning_headers[0]);
    out.push('\n');
    for step in &trace.reasoning_steps {
        render_step(&mut out, step, schema);
    }
    out.push_str(&schema.answer_open);
    out.push_str(&trace.final_answer_text);
    out.push_str(&schema.answer_close);
    out.push('\n');
    out
}

fn render_step(out: &mut String, step: &Step, schema: &TraceSchema) {
    out.push_str(&schema.step_open_tag(step.index));
    out.push('\n');
    out.push_str(&step.text);
    out.push('\n');
    out.push_str(&schema.step_close_tag(step.index));
    out.push('\n');
}

/// Renders only the first `k` canonical steps (no answer tag), the rollout
/// and scoring context for step prefixes.
pub fn render_prefix(trace: &Trace, k: usize, schema: &TraceSchema) -> Result<String, PrefixError> {
    let steps = prefix_of(trace, k)?;
    let mut out = String::new();
    let perception: Vec<&Step> = steps.iter().copied().filter(|s| s.phase == Phase::Perception).collect();
    let reasoning: Vec<&Step> = steps.iter().copied().filter(|s| s.phase == Phase::Reasoning).collect();
    if !perception.is_empty() {
        out.push_str(&schema.perception_headers[0]);
        out.push('\n');
        for step in perception {
            render_step(&mut out, step, schema);
        }
    }
    if !reasoning.is_empty() {
        out.push_str(&schema.reasoning_headers[0]);
        out.push('\n');
        for step in reasoning {
            render_step(&mut out, step, schema);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("prefix length {k} exceeds total steps {total}")]
pub struct PrefixError {
    pub k: usize,
    pub total: usize,
}

/// First `k` steps in canonical order (perception before reasoning).
pub fn prefix_of(trace: &Trace, k: usize) -> Result<Vec<&Step>, PrefixError> {
    let total = trace.total_steps();
    if k > total {
        return Err(PrefixError { k, total });
    }
    Ok(trace.steps().take(k).collect())
}

/// Wire form of a trace attached to its problem, as written to JSONL outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub problem_id: String,
    pub steps: Vec<Step>,
    pub final_answer_text: String,
}

impl TraceRecord {
    pub fn new(problem_id: &str, trace: &Trace) -> Self {
        Self {
            problem_id: problem_id.to_string(),
            steps: trace.steps().cloned().collect(),
            final_answer_text: trace.final_answer_text.clone(),
        }
    }

    pub fn to_trace(&self) -> Result<Trace, String> {
        let perception = self
            .steps
            .iter()
            .filter(|s| s.phase == Phase::Perception)
            .cloned()
            .collect();
        let reasoning = self
            .steps
            .iter()
            .filter(|s| s.phase == Phase::Reasoning)
            .cloned()
            .collect();
        Trace::new(perception, reasoning, self.final_answer_text.clone())
    }
}
