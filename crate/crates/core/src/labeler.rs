//! Step-level correctness labeling.
//!
//! Two labeling schemes feed dataset construction: the MC score of a step
//! (fraction of sampled continuations from that step's prefix that reach the
//! gold answer) and a judge model that analyzes steps in order and stops at
//! the first material error. The consensus filter keeps judge-correct samples
//! only when the MC labels agree; everything after a first incorrect step is
//! discarded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answers::{is_correct, ExtractError, NormalizedAnswer};
use crate::backends::{Backend, BackendError, SamplingParams};
use crate::problem::Problem;
use crate::prompts;
use crate::trace::{render_prefix, Phase, Trace, TraceSchema};

/// Correctness label for one step. `Neutral` exists only for ingested
/// benchmark annotations; the labelers here never produce it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabel {
    Correct,
    Incorrect,
    Neutral,
}

/// Where a verdict came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    McThreshold,
    Judge,
    Consensus,
}

/// One continuation's graded outcome. Extraction failures count as incorrect
/// so the MC denominator stays fixed at the requested n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedContinuation {
    pub final_answer: Result<NormalizedAnswer, ExtractError>,
    pub is_correct: bool,
}

/// Results of rolling out `requested_n` continuations from a step prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub problem_id: String,
    pub prefix_len: usize,
    pub continuations: Vec<GradedContinuation>,
    pub requested_n: u32,
}

impl RolloutBatch {
    pub fn new(
        problem_id: String,
        prefix_len: usize,
        continuations: Vec<GradedContinuation>,
        requested_n: u32,
    ) -> Result<Self, String> {
        if continuations.len() != requested_n as usize {
            return Err(format!(
                "batch holds {} continuations, requested {requested_n}",
                continuations.len()
            ));
        }
        Ok(Self {
            problem_id,
            prefix_len,
            continuations,
            requested_n,
        })
    }

    pub fn correct_count(&self) -> u32 {
        self.continuations.iter().filter(|c| c.is_correct).count() as u32
    }
}

/// MC score: correct continuations over requested continuations. The count
/// and the single division keep the value an exact multiple of
/// 1/requested_n.
pub fn mc_score(batch: &RolloutBatch) -> f64 {
    f64::from(batch.correct_count()) / f64::from(batch.requested_n)
}

/// A step is correct when its MC score strictly exceeds the threshold.
pub fn label_by_threshold(score: f64, threshold: f64) -> StepLabel {
    if score > threshold {
        StepLabel::Correct
    } else {
        StepLabel::Incorrect
    }
}

/// Samples `params.n` continuations from the first `k` steps of `trace` and
/// grades each continuation's final answer against the problem's key.
pub async fn rollout_step(
    problem: &Problem,
    trace: &Trace,
    k: usize,
    schema: &TraceSchema,
    params: SamplingParams,
    policy: &dyn Backend,
) -> Result<RolloutBatch, BackendError> {
    let prefix_text = render_prefix(trace, k, schema)
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    let requested_n = params.n;
    let request = prompts::rollout_request(problem, &prefix_text, schema, params);
    let completions = policy.generate(&request).await?;
    let gold = problem
        .gold()
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    let kind = problem.answer_kind();
    let continuations = completions
        .iter()
        .map(|text| {
            let final_answer = crate::answers::extract_answer_in_solution(text, schema, &kind);
            let correct = match &final_answer {
                Ok(answer) => is_correct(answer, &gold).unwrap_or(false),
                Err(_) => false,
            };
            GradedContinuation {
                final_answer,
                is_correct: correct,
            }
        })
        .collect();
    RolloutBatch::new(problem.id.clone(), k, continuations, requested_n)
        .map_err(BackendError::InvalidRequest)
}

/// Judge verdict on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeConclusion {
    Correct,
    Incorrect,
}

/// Parsed judge output: one analysis per reviewed step, a conclusion, and,
/// when the conclusion is Incorrect, the 1-based global index of the first
/// erroneous step (which equals the analysis count, since the judge stops
/// there).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResult {
    pub analyses: Vec<String>,
    pub conclusion: JudgeConclusion,
    pub first_error_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeParseError {
    #[error("no conclusion tag in judge output")]
    MissingConclusion,
    #[error("conclusion must be exactly Correct or Incorrect, got {0:?}")]
    BadConclusion(String),
    #[error("analysis tags are malformed: {0}")]
    MalformedAnalyses(String),
    #[error("judge analyzed {analyses} steps but the solution has {total_steps} and concluded {conclusion:?}")]
    AnalysisCountMismatch {
        analyses: usize,
        total_steps: usize,
        conclusion: JudgeConclusion,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

const ANALYSIS_OPEN_PREFIX: &str = "<analysis_";
const CONCLUSION_OPEN: &str = "<conclusion>";
const CONCLUSION_CLOSE: &str = "</conclusion>";

/// Parses raw judge output against the expected step count.
///
/// Analyses must be numbered consecutively from 1; a second run restarting at
/// 1 is accepted for the perception/reasoning section split. The conclusion
/// body must be exactly `Correct` or `Incorrect` after whitespace trimming.
pub fn parse_judge_output(text: &str, total_steps: usize) -> Result<JudgeResult, JudgeParseError> {
    let mut analyses = Vec::new();
    let mut cursor = 0usize;
    let mut expected = 1usize;
    let mut runs = 1usize;
    while let Some(rel) = text[cursor..].find(ANALYSIS_OPEN_PREFIX) {
        let tag_pos = cursor + rel;
        let digits_from = tag_pos + ANALYSIS_OPEN_PREFIX.len();
        let digits_end = text[digits_from..]
            .find(|c: char| !c.is_ascii_digit())
            .map(|o| digits_from + o)
            .unwrap_or(text.len());
        if digits_end == digits_from || !text[digits_end..].starts_with('>') {
            cursor = digits_from;
            continue;
        }
        let n: usize = text[digits_from..digits_end]
            .parse()
            .map_err(|_| JudgeParseError::MalformedAnalyses("unparseable index".into()))?;
        if n != expected {
            if n == 1 && expected > 1 && runs == 1 {
                // numbering restarted for the second section
                runs = 2;
            } else {
                return Err(JudgeParseError::MalformedAnalyses(format!(
                    "expected analysis {expected}, found analysis {n}"
                )));
            }
        }
        let body_start = digits_end + 1;
        let close_tag = format!("</analysis_{n}>");
        let Some(close_rel) = text[body_start..].find(&close_tag) else {
            return Err(JudgeParseError::MalformedAnalyses(format!(
                "analysis {n} is never closed"
            )));
        };
        analyses.push(text[body_start..body_start + close_rel].trim().to_string());
        expected = n + 1;
        cursor = body_start + close_rel + close_tag.len();
    }

    let Some(open) = text.find(CONCLUSION_OPEN) else {
        return Err(JudgeParseError::MissingConclusion);
    };
    let body_start = open + CONCLUSION_OPEN.len();
    let Some(close_rel) = text[body_start..].find(CONCLUSION_CLOSE) else {
        return Err(JudgeParseError::MissingConclusion);
    };
    let body = text[body_start..body_start + close_rel].trim();
    let conclusion = match body {
        "Correct" => JudgeConclusion::Correct,
        "Incorrect" => JudgeConclusion::Incorrect,
        other => return Err(JudgeParseError::BadConclusion(other.to_string())),
    };

    match conclusion {
        JudgeConclusion::Correct if analyses.len() != total_steps => {
            Err(JudgeParseError::AnalysisCountMismatch {
                analyses: analyses.len(),
                total_steps,
                conclusion,
            })
        }
        JudgeConclusion::Incorrect
            if analyses.is_empty() || analyses.len() > total_steps =>
        {
            Err(JudgeParseError::AnalysisCountMismatch {
                analyses: analyses.len(),
                total_steps,
                conclusion,
            })
        }
        JudgeConclusion::Correct => Ok(JudgeResult {
            analyses,
            conclusion,
            first_error_index: None,
        }),
        JudgeConclusion::Incorrect => {
            let first_error_index = Some(analyses.len());
            Ok(JudgeResult {
                analyses,
                conclusion,
                first_error_index,
            })
        }
    }
}

/// Renders the judge prompt for a solution and parses the strict
/// analysis/conclusion format. Format violations surface as
/// [`JudgeParseError`] so callers can quarantine the sample.
pub async fn judge_solution(
    problem: &Problem,
    trace: &Trace,
    schema: &TraceSchema,
    judge: &dyn Backend,
) -> Result<JudgeResult, JudgeParseError> {
    let solution_text = crate::trace::render_trace(trace, schema);
    let request = prompts::judge_request(problem, &solution_text);
    let outputs = judge.generate(&request).await?;
    let text = outputs.first().map(String::as_str).unwrap_or("");
    parse_judge_output(text, trace.total_steps())
}

/// Consensus-filter bucket for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusBucket {
    /// Judge found an incorrect step; MC labels are ignored.
    IncorrectIdentified,
    /// Judge says correct and every MC label agrees.
    ConsensusCorrect,
    /// Judge says correct but MC flags some step; excluded from training.
    Discard,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("judge covered {expected} steps but {got} MC labels were supplied")]
pub struct CoverageMismatch {
    pub expected: usize,
    pub got: usize,
}

/// Applies the consensus rule. When the judge concludes Correct, the MC
/// labels must cover all steps.
pub fn consensus_filter(
    judge: &JudgeResult,
    mc_labels: &[StepLabel],
) -> Result<ConsensusBucket, CoverageMismatch> {
    match judge.conclusion {
        JudgeConclusion::Incorrect => Ok(ConsensusBucket::IncorrectIdentified),
        JudgeConclusion::Correct => {
            if mc_labels.len() != judge.analyses.len() {
                return Err(CoverageMismatch {
                    expected: judge.analyses.len(),
                    got: mc_labels.len(),
                });
            }
            if mc_labels.iter().all(|l| *l == StepLabel::Correct) {
                Ok(ConsensusBucket::ConsensusCorrect)
            } else {
                Ok(ConsensusBucket::Discard)
            }
        }
    }
}

/// Sample-level label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleLabel {
    AllCorrect,
    HasIncorrect,
}

/// Verdict for one retained step. `step_index` is the 1-based global index
/// (perception steps first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    #[serde(rename = "index")]
    pub step_index: usize,
    pub phase: Phase,
    pub label: StepLabel,
    pub origin: LabelOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_rationale: Option<String>,
}

/// A labeled training sample after truncation: verdicts exist only for steps
/// up to and including the first incorrect one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub problem_id: String,
    pub source: String,
    pub trace: Trace,
    pub verdicts: Vec<StepVerdict>,
    pub sample_label: SampleLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_phase: Option<Phase>,
}

impl LabeledSample {
    pub fn first_error_index(&self) -> Option<usize> {
        self.verdicts
            .iter()
            .find(|v| v.label == StepLabel::Incorrect)
            .map(|v| v.step_index)
    }
}

/// Builds the truncated sample from a parsed judge result: verdicts for steps
/// 1..=first_error_index with the last one Incorrect, or all-correct verdicts
/// when the judge found no error.
pub fn build_labeled_sample(
    problem_id: &str,
    source: &str,
    trace: &Trace,
    judge: &JudgeResult,
) -> LabeledSample {
    let retained = match judge.first_error_index {
        Some(k) => k,
        None => trace.total_steps(),
    };
    let mut verdicts = Vec::with_capacity(retained);
    for (i, step) in trace.steps().take(retained).enumerate() {
        let global_index = i + 1;
        let is_error_step = judge.first_error_index == Some(global_index);
        verdicts.push(StepVerdict {
            step_index: global_index,
            phase: step.phase,
            label: if is_error_step {
                StepLabel::Incorrect
            } else {
                StepLabel::Correct
            },
            origin: LabelOrigin::Judge,
            mc_score: None,
            judge_rationale: judge.analyses.get(i).cloned(),
        });
    }
    let (sample_label, error_phase) = match judge.first_error_index {
        Some(k) => (SampleLabel::HasIncorrect, trace.phase_of(k)),
        None => (SampleLabel::AllCorrect, None),
    };
    LabeledSample {
        problem_id: problem_id.to_string(),
        source: source.to_string(),
        trace: trace.clone(),
        verdicts,
        sample_label,
        error_phase,
    }
}

/// MC-only labeling: thresholds every step score, truncating after the first
/// step at or below the threshold.
pub fn label_sample_by_mc(
    problem_id: &str,
    source: &str,
    trace: &Trace,
    scores: &[f64],
    threshold: f64,
) -> Result<LabeledSample, CoverageMismatch> {
    if scores.len() != trace.total_steps() {
        return Err(CoverageMismatch {
            expected: trace.total_steps(),
            got: scores.len(),
        });
    }
    let mut verdicts = Vec::new();
    let mut error_phase = None;
    for (i, step) in trace.steps().enumerate() {
        let label = label_by_threshold(scores[i], threshold);
        verdicts.push(StepVerdict {
            step_index: i + 1,
            phase: step.phase,
            label,
            origin: LabelOrigin::McThreshold,
            mc_score: Some(scores[i]),
            judge_rationale: None,
        });
        if label == StepLabel::Incorrect {
            error_phase = Some(step.phase);
            break;
        }
    }
    let sample_label = if error_phase.is_some() {
        SampleLabel::HasIncorrect
    } else {
        SampleLabel::AllCorrect
    };
    Ok(LabeledSample {
        problem_id: problem_id.to_string(),
        source: source.to_string(),
        trace: trace.clone(),
        verdicts,
        sample_label,
        error_phase,
    })
}

/// Upgrades a judge-correct sample to consensus origin, attaching the MC
/// score that corroborated each step.
pub fn attach_consensus_scores(sample: &mut LabeledSample, scores: &[f64]) {
    for (verdict, score) in sample.verdicts.iter_mut().zip(scores) {
        verdict.origin = LabelOrigin::Consensus;
        verdict.mc_score = Some(*score);
    }
}

/// Agreement between the judge-based and MC-based labeling schemes, measured
/// over samples that either scheme flags as containing an incorrect step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Samples flagged HasIncorrect by at least one scheme.
    pub flagged: usize,
    /// Fraction of flagged samples where both schemes say HasIncorrect.
    pub label_agreement: f64,
    /// Fraction of flagged samples where both schemes additionally agree on
    /// the first-error position.
    pub position_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("labeling schemes cover different problem keys: {0}")]
pub struct KeyMismatch(pub String);

pub fn labeler_agreement(
    judge_samples: &[LabeledSample],
    mc_samples: &[LabeledSample],
) -> Result<AgreementReport, KeyMismatch> {
    use std::collections::BTreeMap;
    let by_id = |samples: &[LabeledSample]| -> BTreeMap<String, (SampleLabel, Option<usize>)> {
        samples
            .iter()
            .map(|s| (s.problem_id.clone(), (s.sample_label, s.first_error_index())))
            .collect()
    };
    let judge = by_id(judge_samples);
    let mc = by_id(mc_samples);
    if judge.len() != judge_samples.len() || mc.len() != mc_samples.len() {
        return Err(KeyMismatch("duplicate problem ids".into()));
    }
    if judge.keys().ne(mc.keys()) {
        return Err(KeyMismatch("key sets differ".into()));
    }
    let mut flagged = 0usize;
    let mut label_agree = 0usize;
    let mut position_agree = 0usize;
    for (id, (j_label, j_pos)) in &judge {
        let (m_label, m_pos) = &mc[id];
        let either = *j_label == SampleLabel::HasIncorrect || *m_label == SampleLabel::HasIncorrect;
        if !either {
            continue;
        }
        flagged += 1;
        if j_label == m_label {
            label_agree += 1;
            if j_pos == m_pos {
                position_agree += 1;
            }
        }
    }
    let rate = |n: usize| {
        if flagged == 0 {
            1.0
        } else {
            n as f64 / flagged as f64
        }
    };
    Ok(AgreementReport {
        flagged,
        label_agreement: rate(label_agree),
        position_agreement: rate(position_agree),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sim::{SimBackend, SimScript};
    use crate::problem::AnswerKindTag;
    use crate::trace::{parse_trace, Step};

    fn batch(correct: u32, total: u32) -> RolloutBatch {
        let continuations = (0..total)
            .map(|i| GradedContinuation {
                final_answer: Err(ExtractError::NoAnswerFound),
                is_correct: i < correct,
            })
            .collect();
        RolloutBatch::new("p".into(), 1, continuations, total).unwrap()
    }

    fn five_step_trace() -> Trace {
        Trace::new(
            vec![
                Step::new(Phase::Perception, 1, "p1").unwrap(),
                Step::new(Phase::Perception, 2, "p2").unwrap(),
            ],
            vec![
                Step::new(Phase::Reasoning, 1, "r1").unwrap(),
                Step::new(Phase::Reasoning, 2, "r2").unwrap(),
                Step::new(Phase::Reasoning, 3, "r3").unwrap(),
            ],
            "\\boxed{B}".into(),
        )
        .unwrap()
    }

    #[test]
    fn mc_score_is_the_exact_ratio() {
        assert_eq!(mc_score(&batch(8, 16)), 0.5);
        assert_eq!(mc_score(&batch(0, 16)), 0.0);
        assert_eq!(mc_score(&batch(16, 16)), 1.0);
        assert_eq!(mc_score(&batch(4, 16)), 0.25);
    }

    #[test]
    fn threshold_labels_are_strict() {
        assert_eq!(label_by_threshold(0.5, 0.0), StepLabel::Correct);
        assert_eq!(label_by_threshold(0.0, 0.0), StepLabel::Incorrect);
        assert_eq!(label_by_threshold(0.9, 0.9), StepLabel::Incorrect);
    }

    #[test]
    fn judge_output_with_early_stop() {
        let text = "<analysis_1>fine</analysis_1><analysis_2>fine</analysis_2>\
                    <analysis_3>error here</analysis_3>\n<conclusion>\nIncorrect\n</conclusion>";
        let result = parse_judge_output(text, 5).unwrap();
        assert_eq!(result.conclusion, JudgeConclusion::Incorrect);
        assert_eq!(result.first_error_index, Some(3));
        assert_eq!(result.analyses.len(), 3);
    }

    #[test]
    fn judge_output_all_correct() {
        let text = "<analysis_1>a</analysis_1><analysis_2>b</analysis_2>\
                    <analysis_3>c</analysis_3><analysis_4>d</analysis_4><analysis_5>e</analysis_5>\
                    <conclusion>Correct</conclusion>";
        let result = parse_judge_output(text, 5).unwrap();
        assert_eq!(result.conclusion, JudgeConclusion::Correct);
        assert_eq!(result.first_error_index, None);
        assert_eq!(result.analyses.len(), 5);
    }

    #[test]
    fn sectioned_numbering_restarts_are_accepted() {
        // perception analyses 1..2, reasoning analyses 1..3
        let text = "[Perception]<analysis_1>a</analysis_1><analysis_2>b</analysis_2>\
                    [Reasoning]<analysis_1>c</analysis_1><analysis_2>d</analysis_2>\
                    <analysis_3>e</analysis_3><conclusion>Correct</conclusion>";
        let result = parse_judge_output(text, 5).unwrap();
        assert_eq!(result.analyses.len(), 5);
    }

    #[test]
    fn punctuated_conclusion_is_rejected() {
        let text = "<analysis_1>a</analysis_1><conclusion>incorrect.</conclusion>";
        assert!(matches!(
            parse_judge_output(text, 3),
            Err(JudgeParseError::BadConclusion(_))
        ));
    }

    #[test]
    fn analysis_count_must_match_conclusion() {
        let text = "<analysis_1>a</analysis_1><conclusion>Correct</conclusion>";
        assert!(matches!(
            parse_judge_output(text, 3),
            Err(JudgeParseError::AnalysisCountMismatch { .. })
        ));
        let text = "<analysis_1>a</analysis_1><analysis_2>b</analysis_2>\
                    <analysis_3>c</analysis_3><analysis_4>d</analysis_4>\
                    <conclusion>Incorrect</conclusion>";
        assert!(matches!(
            parse_judge_output(text, 3),
            Err(JudgeParseError::AnalysisCountMismatch { .. })
        ));
    }

    #[test]
    fn consensus_filter_branches() {
        let incorrect = JudgeResult {
            analyses: vec!["e".into(), "f".into()],
            conclusion: JudgeConclusion::Incorrect,
            first_error_index: Some(2),
        };
        assert_eq!(
            consensus_filter(&incorrect, &[StepLabel::Incorrect]).unwrap(),
            ConsensusBucket::IncorrectIdentified
        );
        let correct = JudgeResult {
            analyses: vec!["a".into(), "b".into(), "c".into()],
            conclusion: JudgeConclusion::Correct,
            first_error_index: None,
        };
        assert_eq!(
            consensus_filter(&correct, &[StepLabel::Correct; 3]).unwrap(),
            ConsensusBucket::ConsensusCorrect
        );
        assert_eq!(
            consensus_filter(
                &correct,
                &[StepLabel::Correct, StepLabel::Incorrect, StepLabel::Correct]
            )
            .unwrap(),
            ConsensusBucket::Discard
        );
        assert!(consensus_filter(&correct, &[StepLabel::Correct]).is_err());
    }

    #[test]
    fn truncation_and_error_phase() {
        let trace = five_step_trace();
        let first_error = |k: usize| JudgeResult {
            analyses: vec!["a".into(); k],
            conclusion: JudgeConclusion::Incorrect,
            first_error_index: Some(k),
        };
        let sample = build_labeled_sample("p", "raven", &trace, &first_error(1));
        assert_eq!(sample.verdicts.len(), 1);
        assert_eq!(sample.error_phase, Some(Phase::Perception));
        assert_eq!(sample.sample_label, SampleLabel::HasIncorrect);

        let sample = build_labeled_sample("p", "raven", &trace, &first_error(4));
        assert_eq!(sample.verdicts.len(), 4);
        assert_eq!(sample.error_phase, Some(Phase::Reasoning));
        assert_eq!(sample.verdicts[3].label, StepLabel::Incorrect);
        assert!(sample.verdicts[..3].iter().all(|v| v.label == StepLabel::Correct));

        let all_correct = JudgeResult {
            analyses: vec!["a".into(); 5],
            conclusion: JudgeConclusion::Correct,
            first_error_index: None,
        };
        let sample = build_labeled_sample("p", "raven", &trace, &all_correct);
        assert_eq!(sample.verdicts.len(), 5);
        assert_eq!(sample.sample_label, SampleLabel::AllCorrect);
        assert_eq!(sample.error_phase, None);
    }

    #[test]
    fn mc_labeling_truncates_at_first_threshold_failure() {
        let trace = five_step_trace();
        let sample =
            label_sample_by_mc("p", "raven", &trace, &[0.8, 0.6, 0.0, 0.9, 0.9], 0.0).unwrap();
        assert_eq!(sample.verdicts.len(), 3);
        assert_eq!(sample.first_error_index(), Some(3));
        assert_eq!(sample.error_phase, Some(Phase::Reasoning));
        assert_eq!(sample.verdicts[2].mc_score, Some(0.0));
    }

    #[test]
    fn agreement_counting() {
        let trace = five_step_trace();
        let judge_incorrect = |id: &str, k: usize| {
            build_labeled_sample(
                id,
                "s",
                &trace,
                &JudgeResult {
                    analyses: vec!["a".into(); k],
                    conclusion: JudgeConclusion::Incorrect,
                    first_error_index: Some(k),
                },
            )
        };
        let judge_correct = |id: &str| {
            build_labeled_sample(
                id,
                "s",
                &trace,
                &JudgeResult {
                    analyses: vec!["a".into(); 5],
                    conclusion: JudgeConclusion::Correct,
                    first_error_index: None,
                },
            )
        };
        let mc_with = |id: &str, scores: &[f64]| {
            label_sample_by_mc(id, "s", &trace, scores, 0.0).unwrap()
        };

        // identical labelings agree perfectly
        let judge: Vec<_> = vec![judge_incorrect("a", 2), judge_correct("b")];
        let mc = vec![
            mc_with("a", &[0.5, 0.0, 0.5, 0.5, 0.5]),
            mc_with("b", &[0.5; 5]),
        ];
        let report = labeler_agreement(&judge, &mc).unwrap();
        assert_eq!(report.flagged, 1);
        assert_eq!(report.label_agreement, 1.0);
        assert_eq!(report.position_agreement, 1.0);

        // disjoint incorrect sets agree on nothing
        let judge = vec![judge_incorrect("a", 2), judge_correct("b")];
        let mc = vec![mc_with("a", &[0.5; 5]), mc_with("b", &[0.0, 0.5, 0.5, 0.5, 0.5])];
        let report = labeler_agreement(&judge, &mc).unwrap();
        assert_eq!(report.flagged, 2);
        assert_eq!(report.label_agreement, 0.0);

        // 10 samples, 6 flagged, 3 agreements -> 0.5
        let mut judge = Vec::new();
        let mut mc = Vec::new();
        for i in 0..10 {
            let id = format!("p{i}");
            match i {
                0..=2 => {
                    judge.push(judge_incorrect(&id, 2));
                    mc.push(mc_with(&id, &[0.5, 0.0, 0.5, 0.5, 0.5]));
                }
                3..=5 => {
                    judge.push(judge_incorrect(&id, 1));
                    mc.push(mc_with(&id, &[0.5; 5]));
                }
                _ => {
                    judge.push(judge_correct(&id));
                    mc.push(mc_with(&id, &[0.5; 5]));
                }
            }
        }
        let report = labeler_agreement(&judge, &mc).unwrap();
        assert_eq!(report.flagged, 6);
        assert_eq!(report.label_agreement, 0.5);

        let mismatched = vec![judge_correct("zz")];
        assert!(labeler_agreement(&mismatched, &mc).is_err());
    }

    #[tokio::test]
    async fn rollout_step_grades_scripted_continuations() {
        let problem = Problem {
            id: "p1".into(),
            source: "raven".into(),
            image_ref: None,
            question: "which tile?".into(),
            options: Some(vec!["w".into(), "x".into(), "y".into(), "z".into()]),
            answer: "B".into(),
            answer_kind: AnswerKindTag::MultipleChoice,
            solutions: vec![],
            perception: None,
        };
        let schema = TraceSchema::perception_reasoning();
        let trace = parse_trace(
            "[Perception]\n<step_1>grid</step_1>\n[Reasoning]\n<step_1>pattern</step_1>\n<correct_answer>\\boxed{B}</correct_answer>",
            &schema,
        )
        .unwrap();
        let params = SamplingParams::default().with_n(16);

        // all 16 continuations reach the gold answer
        let mut script = SimScript::default();
        let prefix = render_prefix(&trace, 2, &schema).unwrap();
        let request = prompts::rollout_request(&problem, &prefix, &schema, params.clone());
        script.script_completions(
            &request,
            (0..16).map(|_| ("ending \\boxed{B}".to_string(), Some(true))),
        );
        let backend = SimBackend::new(script, 0);
        let batch = rollout_step(&problem, &trace, 2, &schema, params.clone(), &backend)
            .await
            .unwrap();
        assert_eq!(batch.correct_count(), 16);
        assert_eq!(mc_score(&batch), 1.0);

        // 4 correct, 12 wrong -> 0.25, counting oracle over the script
        let mut script = SimScript::default();
        let prefix = render_prefix(&trace, 1, &schema).unwrap();
        let request = prompts::rollout_request(&problem, &prefix, &schema, params.clone());
        let completions: Vec<(String, Option<bool>)> = (0..16)
            .map(|i| {
                if i < 4 {
                    ("\\boxed{B}".to_string(), Some(true))
                } else if i < 14 {
                    ("\\boxed{A}".to_string(), Some(false))
                } else {
                    // unparseable answers count as incorrect, not excluded
                    ("no box at all".to_string(), Some(false))
                }
            })
            .collect();
        let scripted_correct = completions
            .iter()
            .filter(|(t, _)| t.contains("{B}"))
            .count();
        assert_eq!(scripted_correct, 4);
        script.script_completions(&request, completions);
        let backend = SimBackend::new(script, 0);
        let batch = rollout_step(&problem, &trace, 1, &schema, params, &backend)
            .await
            .unwrap();
        assert_eq!(mc_score(&batch), 0.25);
        assert!(batch.continuations[14].final_answer.is_err());
    }

    #[test]
    fn monotonicity_of_mc_score() {
        let base = batch(5, 12);
        let mut more_correct = base.continuations.clone();
        more_correct.push(GradedContinuation {
            final_answer: Err(ExtractError::NoAnswerFound),
            is_correct: true,
        });
        let more_correct = RolloutBatch::new("p".into(), 1, more_correct, 13).unwrap();
        assert!(mc_score(&more_correct) >= mc_score(&base));

        let mut more_wrong = base.continuations.clone();
        more_wrong.push(GradedContinuation {
            final_answer: Err(ExtractError::NoAnswerFound),
            is_correct: false,
        });
        let more_wrong = RolloutBatch::new("p".into(), 1, more_wrong, 13).unwrap();
        assert!(mc_score(&more_wrong) <= mc_score(&base));
    }
}
