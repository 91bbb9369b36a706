//! Evaluation: answer accuracy, step-level macro-F1 under the benchmark
//! protocol (neutral gold steps dropped), and the score-distribution error
//! analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answers::NormalizedAnswer;
use crate::backends::{Backend, BackendError};
use crate::labeler::StepLabel;
use crate::problem::Problem;
use crate::prompts;
use crate::tts::Strategy;

/// One benchmark problem with per-step gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStepSample {
    pub problem: Problem,
    pub steps: Vec<String>,
    pub gold_labels: Vec<StepLabel>,
}

impl BenchStepSample {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.steps.len() != self.gold_labels.len() {
            return Err(EvalError::LengthMismatch {
                predictions: self.steps.len(),
                gold: self.gold_labels.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{predictions} predictions vs {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("predictions may not contain neutral labels")]
    NeutralPrediction,
    #[error("no gold answer for problem {0}")]
    MissingGold(String),
}

/// Decision rule over the renormalized two-token distribution: correct iff
/// P(+) strictly exceeds P(-), i.e. p_plus > 0.5.
pub fn classify_step(p_plus: f64) -> StepLabel {
    if p_plus > 0.5 {
        StepLabel::Correct
    } else {
        StepLabel::Incorrect
    }
}

/// One class's confusion counts, with that class taken as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// F1 under the degenerate-class rules: `None` when the class has no gold
    /// members and no predictions (excluded from the macro average); 0 when
    /// it has one side but not the other.
    pub fn f1(&self) -> Option<f64> {
        let gold = self.tp + self.fn_;
        let predicted = self.tp + self.fp;
        if gold == 0 && predicted == 0 {
            return None;
        }
        if self.tp == 0 {
            return Some(0.0);
        }
        let precision = self.tp as f64 / predicted as f64;
        let recall = self.tp as f64 / gold as f64;
        Some(2.0 * precision * recall / (precision + recall))
    }
}

/// Macro-F1 over {correct, incorrect} for one pooled set of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Breakdown {
    pub macro_f1: f64,
    pub correct_f1: Option<f64>,
    pub incorrect_f1: Option<f64>,
    pub confusion_correct: Confusion,
    pub confusion_incorrect: Confusion,
    pub evaluated_steps: u64,
    pub dropped_neutral: u64,
}

/// Pools predictions against gold labels, dropping steps whose gold label is
/// neutral, and computes per-class F1 plus their unweighted mean.
pub fn macro_f1(predictions: &[StepLabel], gold: &[StepLabel]) -> Result<F1Breakdown, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if predictions.contains(&StepLabel::Neutral) {
        return Err(EvalError::NeutralPrediction);
    }
    let mut correct = Confusion::default();
    let mut incorrect = Confusion::default();
    let mut dropped = 0u64;
    let mut evaluated = 0u64;
    for (p, g) in predictions.iter().zip(gold) {
        if *g == StepLabel::Neutral {
            dropped += 1;
            continue;
        }
        evaluated += 1;
        for (class, counts) in [
            (StepLabel::Correct, &mut correct),
            (StepLabel::Incorrect, &mut incorrect),
        ] {
            match (*g == class, *p == class) {
                (true, true) => counts.tp += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    let correct_f1 = correct.f1();
    let incorrect_f1 = incorrect.f1();
    let included: Vec<f64> = [correct_f1, incorrect_f1].into_iter().flatten().collect();
    let macro_f1 = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(F1Breakdown {
        macro_f1,
        correct_f1,
        incorrect_f1,
        confusion_correct: correct,
        confusion_incorrect: incorrect,
        evaluated_steps: evaluated,
        dropped_neutral: dropped,
    })
}

/// Evaluation report: the overall value, per-source breakdown, and (for
/// macro-F1) pooled confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    /// Pooled overall value (per-step pooling for macro-F1, per-problem for
    /// accuracy).
    pub overall: f64,
    /// Unweighted mean of the per-source values, reported alongside the
    /// pooled number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_source_averaged: Option<f64>,
    pub per_source: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<F1Breakdown>,
    pub samples: u64,
    pub dropped_neutral: u64,
}

/// Step predictions for a set of benchmark samples, grouped per source
/// column. Each source is pooled separately; the overall value pools every
/// step, and the source-averaged value is also reported.
pub fn macro_f1_report(
    rows: &[(String, Vec<StepLabel>, Vec<StepLabel>)],
) -> Result<EvalReport, EvalError> {
    let mut by_source: BTreeMap<String, (Vec<StepLabel>, Vec<StepLabel>)> = BTreeMap::new();
    for (source, predictions, gold) in rows {
        if predictions.len() != gold.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                gold: gold.len(),
            });
        }
        let entry = by_source.entry(source.clone()).or_default();
        entry.0.extend_from_slice(predictions);
        entry.1.extend_from_slice(gold);
    }
    let mut per_source = BTreeMap::new();
    let mut all_predictions = Vec::new();
    let mut all_gold = Vec::new();
    for (source, (predictions, gold)) in &by_source {
        per_source.insert(source.clone(), macro_f1(predictions, gold)?.macro_f1);
        all_predictions.extend_from_slice(predictions);
        all_gold.extend_from_slice(gold);
    }
    let pooled = macro_f1(&all_predictions, &all_gold)?;
    let averaged = if per_source.is_empty() {
        None
    } else {
        Some(per_source.values().sum::<f64>() / per_source.len() as f64)
    };
    Ok(EvalReport {
        metric: "macro_f1".into(),
        overall: pooled.macro_f1,
        overall_source_averaged: averaged,
        per_source,
        samples: pooled.evaluated_steps,
        dropped_neutral: pooled.dropped_neutral,
        breakdown: Some(pooled),
    })
}

/// A strategy run's graded selection for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub problem_id: String,
    pub source: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_answer: Option<NormalizedAnswer>,
    pub aggregate: f64,
    pub correct: bool,
}

/// Fraction of outcomes whose selected answer is correct, with a per-source
/// breakdown. Permutation-invariant over problems.
pub fn eval_accuracy(
    rows: &[OutcomeRow],
    gold: &BTreeMap<String, NormalizedAnswer>,
) -> Result<EvalReport, EvalError> {
    let mut per_source_hits: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut hits = 0u64;
    for row in rows {
        if !gold.contains_key(&row.problem_id) {
            return Err(EvalError::MissingGold(row.problem_id.clone()));
        }
        let entry = per_source_hits.entry(row.source.clone()).or_default();
        entry.1 += 1;
        if row.correct {
            entry.0 += 1;
            hits += 1;
        }
    }
    let per_source: BTreeMap<String, f64> = per_source_hits
        .iter()
        .map(|(s, (h, n))| (s.clone(), *h as f64 / *n as f64))
        .collect();
    let averaged = if per_source.is_empty() {
        None
    } else {
        Some(per_source.values().sum::<f64>() / per_source.len() as f64)
    };
    Ok(EvalReport {
        metric: "accuracy".into(),
        overall: if rows.is_empty() {
            0.0
        } else {
            hits as f64 / rows.len() as f64
        },
        overall_source_averaged: averaged,
        per_source,
        breakdown: None,
        samples: rows.len() as u64,
        dropped_neutral: 0,
    })
}

/// Distribution of aggregate scores among incorrectly-answered outcomes:
/// ten equal-width bins over the unit interval, final bin right-closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub strategy: Strategy,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    pub incorrect_total: u64,
}

impl ScoreHistogram {
    fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            bin_edges: (0..=10).map(|i| i as f64 / 10.0).collect(),
            counts: vec![0; 10],
            mean: None,
            incorrect_total: 0,
        }
    }

    fn push(&mut self, score: f64) {
        let clamped = score.clamp(0.0, 1.0);
        let bin = ((clamped * 10.0).floor() as usize).min(9);
        self.counts[bin] += 1;
        self.incorrect_total += 1;
    }

    /// CSV rows `(bin_low, bin_high, count)` for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, count) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{:.1},{:.1},{}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                count
            ));
        }
        out
    }
}

/// Histograms of incorrect-selection scores, one per strategy present in the
/// input. Outcomes with correct selections only contribute empty histograms.
pub fn score_error_analysis(rows: &[OutcomeRow]) -> BTreeMap<Strategy, ScoreHistogram> {
    let mut histograms: BTreeMap<Strategy, ScoreHistogram> = BTreeMap::new();
    let mut sums: BTreeMap<Strategy, f64> = BTreeMap::new();
    for row in rows {
        let hist = histograms
            .entry(row.strategy)
            .or_insert_with(|| ScoreHistogram::new(row.strategy));
        if !row.correct {
            hist.push(row.aggregate);
            *sums.entry(row.strategy).or_default() += row.aggregate;
        }
    }
    for (strategy, hist) in &mut histograms {
        if hist.incorrect_total > 0 {
            hist.mean = Some(sums[strategy] / hist.incorrect_total as f64);
        }
    }
    histograms
}

/// Scores every step prefix of a benchmark sample with the PRM and returns
/// the per-step p_plus values.
pub async fn score_bench_sample(
    sample: &BenchStepSample,
    prm: &dyn Backend,
) -> Result<Vec<f64>, BackendError> {
    let mut scores = Vec::with_capacity(sample.steps.len());
    let mut context = String::new();
    for (i, step) in sample.steps.iter().enumerate() {
        if !context.is_empty() {
            context.push('\n');
        }
        context.push_str(&format!("Step {}: {}", i + 1, step));
        let request = prompts::prm_step_request(&sample.problem, &context, i + 1);
        let probs = prm.choice_probability(&request).await?;
        scores.push(probs.p_plus().unwrap_or(0.0));
    }
    Ok(scores)
}
