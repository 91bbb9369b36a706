//! Dataset assembly: accounting statistics, the balanced variant, training
//! record export, and perception mutation pairs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError};
use crate::labeler::{LabeledSample, SampleLabel, StepLabel};
use crate::problem::Problem;
use crate::prompts;
use crate::seeds;
use crate::trace::Phase;

/// A sample excluded from training (consensus disagreement), kept for
/// accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardRecord {
    pub problem_id: String,
    pub source: String,
    pub reason: String,
}

/// Accounting row, per source and in total.
///
/// Step counts cover retained verdict steps only; `avg_steps_per_solution`
/// measures full solutions before truncation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsRow {
    pub valid_samples: u64,
    pub discarded_samples: u64,
    pub training_samples: u64,
    pub incorrect_sample_fraction: f64,
    pub total_steps: u64,
    pub correct_steps: u64,
    pub incorrect_steps: u64,
    pub perception_error_fraction: f64,
    pub reasoning_error_fraction: f64,
    pub avg_steps_per_solution: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_source: BTreeMap<String, StatsRow>,
    pub total: StatsRow,
}

#[derive(Debug, Default)]
struct Accumulator {
    discarded: u64,
    training: u64,
    incorrect_samples: u64,
    perception_errors: u64,
    reasoning_errors: u64,
    verdict_steps: u64,
    correct_steps: u64,
    incorrect_steps: u64,
    full_solution_steps: u64,
}

impl Accumulator {
    fn row(&self) -> StatsRow {
        let frac = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        StatsRow {
            valid_samples: self.training + self.discarded,
            discarded_samples: self.discarded,
            training_samples: self.training,
            incorrect_sample_fraction: frac(self.incorrect_samples, self.training),
            total_steps: self.verdict_steps,
            correct_steps: self.correct_steps,
            incorrect_steps: self.incorrect_steps,
            perception_error_fraction: frac(self.perception_errors, self.incorrect_samples),
            reasoning_error_fraction: frac(self.reasoning_errors, self.incorrect_samples),
            avg_steps_per_solution: frac(self.full_solution_steps, self.training),
        }
    }
}

/// Aggregates retained samples plus the discard log into per-source and total
/// accounting rows. Totals are permutation-invariant over the inputs.
pub fn compute_stats(samples: &[LabeledSample], discard_log: &[DiscardRecord]) -> DatasetStats {
    let mut acc: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut total = Accumulator::default();
    for sample in samples {
        let a = acc.entry(sample.source.clone()).or_default();
        for slot in [&mut *a, &mut total] {
            slot.training += 1;
            slot.full_solution_steps += sample.trace.total_steps() as u64;
            slot.verdict_steps += sample.verdicts.len() as u64;
            slot.correct_steps += sample
                .verdicts
                .iter()
                .filter(|v| v.label == StepLabel::Correct)
                .count() as u64;
            slot.incorrect_steps += sample
                .verdicts
                .iter()
                .filter(|v| v.label == StepLabel::Incorrect)
                .count() as u64;
            if sample.sample_label == SampleLabel::HasIncorrect {
                slot.incorrect_samples += 1;
                match sample.error_phase {
                    Some(Phase::Perception) => slot.perception_errors += 1,
                    Some(Phase::Reasoning) => slot.reasoning_errors += 1,
                    None => {}
                }
            }
        }
    }
    for discard in discard_log {
        acc.entry(discard.source.clone()).or_default().discarded += 1;
        total.discarded += 1;
    }
    DatasetStats {
        per_source: acc.iter().map(|(k, a)| (k.clone(), a.row())).collect(),
        total: total.row(),
    }
}

/// Plain-text accounting table, one row per statistic with per-source
/// sub-rows.
pub fn render_stats_table(stats: &DatasetStats) -> String {
    let mut lines: Vec<(String, String)> = Vec::new();
    let pct = |f: f64| format!("{:.1}%", f * 100.0);
    lines.push(("Valid Samples".into(), stats.total.valid_samples.to_string()));
    lines.push(("Discarded Samples".into(), stats.total.discarded_samples.to_string()));
    lines.push(("Training Samples".into(), stats.total.training_samples.to_string()));
    for (source, row) in &stats.per_source {
        lines.push((format!("  - {source}"), row.training_samples.to_string()));
    }
    lines.push((
        "Incorrect Samples".into(),
        pct(stats.total.incorrect_sample_fraction),
    ));
    lines.push((
        "Correct Samples".into(),
        pct(1.0 - stats.total.incorrect_sample_fraction),
    ));
    lines.push(("Total Steps".into(), stats.total.total_steps.to_string()));
    lines.push(("  - Correct Steps".into(), stats.total.correct_steps.to_string()));
    lines.push(("  - Incorrect Steps".into(), stats.total.incorrect_steps.to_string()));
    lines.push((
        "    - Perception Errors".into(),
        pct(stats.total.perception_error_fraction),
    ));
    lines.push((
        "    - Reasoning Errors".into(),
        pct(stats.total.reasoning_error_fraction),
    ));
    lines.push((
        "Avg. Steps per Solution".into(),
        format!("{:.2}", stats.total.avg_steps_per_solution),
    ));
    let width = lines.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (label, value) in lines {
        out.push_str(&format!("{label:<width$}  {value:>12}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BalanceError {
    #[error("majority source {0:?} has no samples")]
    MajoritySourceMissing(String),
    #[error("cannot equalize: need {need} majority incorrect samples, {available} available")]
    Infeasible { need: i64, available: u64 },
}

/// Builds the balanced variant: every non-majority sample is kept, every
/// all-correct majority sample is kept, and majority incorrect samples are
/// downsampled (uniform, without replacement, seeded) until the global
/// all-correct and has-incorrect counts are equal. Output preserves input
/// order.
pub fn balance(
    samples: &[LabeledSample],
    majority_source: &str,
    seed: u64,
) -> Result<Vec<LabeledSample>, BalanceError> {
    if !samples.iter().any(|s| s.source == majority_source) {
        return Err(BalanceError::MajoritySourceMissing(majority_source.into()));
    }
    let all_correct_total = samples
        .iter()
        .filter(|s| s.sample_label == SampleLabel::AllCorrect)
        .count() as i64;
    let majority_incorrect: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.source == majority_source && s.sample_label == SampleLabel::HasIncorrect
        })
        .map(|(i, _)| i)
        .collect();
    let other_incorrect = samples
        .iter()
        .filter(|s| s.source != majority_source && s.sample_label == SampleLabel::HasIncorrect)
        .count() as i64;

    let need = all_correct_total - other_incorrect;
    let available = majority_incorrect.len() as u64;
    if need < 0 || need as u64 > available {
        return Err(BalanceError::Infeasible { need, available });
    }

    let mut pool = majority_incorrect;
    let mut rng = seeds::stream_rng(seed, "balance", majority_source);
    pool.shuffle(&mut rng);
    let keep: std::collections::HashSet<usize> = pool.into_iter().take(need as usize).collect();

    Ok(samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            !(s.source == majority_source && s.sample_label == SampleLabel::HasIncorrect)
                || keep.contains(i)
        })
        .map(|(_, s)| s.clone())
        .collect())
}

/// One supervised round of a training record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRound {
    pub text: String,
    /// Exactly `"+"` or `"-"`.
    pub target: String,
    /// Rounds masked out of the loss keep their target but are not
    /// supervised (the perception-free ablation).
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub supervised: bool,
}

fn default_true() -> bool {
    true
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_true(b: &bool) -> bool {
    *b
}

/// JSONL training record: `{problem_id, image_ref, question,
/// system_prompt_id, rounds:[{text, target}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub problem_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub question: String,
    pub system_prompt_id: String,
    pub rounds: Vec<TrainingRound>,
}

/// Converts truncated samples into step-supervision records: one round per
/// retained verdict, targets mirroring the labels, so a `"-"` can only be
/// terminal. `mask_perception` flags perception rounds as unsupervised.
pub fn export_training_records(
    samples: &[LabeledSample],
    problems: &BTreeMap<String, Problem>,
    system_prompt_id: &str,
    mask_perception: bool,
) -> Vec<TrainingRecord> {
    samples
        .iter()
        .map(|sample| {
            let problem = problems.get(&sample.problem_id);
            let steps: Vec<&crate::trace::Step> = sample.trace.steps().collect();
            let rounds = sample
                .verdicts
                .iter()
                .map(|v| TrainingRound {
                    text: steps
                        .get(v.step_index - 1)
                        .map(|s| s.text.clone())
                        .unwrap_or_default(),
                    target: match v.label {
                        StepLabel::Incorrect => crate::backends::MINUS_TOKEN.to_string(),
                        _ => crate::backends::PLUS_TOKEN.to_string(),
                    },
                    supervised: !(mask_perception && v.phase == Phase::Perception),
                })
                .collect();
            TrainingRecord {
                problem_id: sample.problem_id.clone(),
                image_ref: problem.and_then(|p| p.image_ref.clone()),
                question: problem.map(|p| p.question.clone()).unwrap_or_default(),
                system_prompt_id: system_prompt_id.to_string(),
                rounds,
            }
        })
        .collect()
}

/// A rephrased ground-truth perception plus its single-mutation negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionPair {
    pub problem_id: String,
    pub positive_text: String,
    pub negative_text: String,
    pub mutation_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutationError {
    #[error("generated mutation is invalid: {0}")]
    GenerationInvalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Word-level characterization of how the negative departs from the original
/// description.
fn mutation_note(original: &str, negative: &str) -> String {
    let a: Vec<&str> = original.split_whitespace().collect();
    let b: Vec<&str> = negative.split_whitespace().collect();
    if a.len() == b.len() {
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        if diffs.len() == 1 {
            let i = diffs[0];
            return format!("attribute: {:?} -> {:?}", a[i], b[i]);
        }
        if !diffs.is_empty() {
            return format!("rewrite: {} tokens changed", diffs.len());
        }
        return "rewrite: reordered".into();
    }
    format!("edit: {} -> {} tokens", a.len(), b.len())
}

/// Produces the positive (rephrase) and negative (single subtle mutation) for
/// one problem's ground-truth perception. An invalid negative (empty, or
/// equal to the positive) is retried once before the pair is rejected for
/// quarantine.
pub async fn mutate_perception(
    problem: &Problem,
    perception_text: &str,
    generator: &dyn Backend,
) -> Result<PerceptionPair, MutationError> {
    let rephrase = generator
        .generate(&prompts::rephrase_request(problem, perception_text))
        .await?;
    let positive = rephrase.first().map(|t| t.trim().to_string()).unwrap_or_default();
    if positive.is_empty() {
        return Err(MutationError::GenerationInvalid("empty rephrase".into()));
    }

    let mut last_reason = String::new();
    for _attempt in 0..2 {
        let mutated = generator
            .generate(&prompts::mutate_request(problem, perception_text))
            .await?;
        let negative = mutated.first().map(|t| t.trim().to_string()).unwrap_or_default();
        if negative.is_empty() {
            last_reason = "empty mutation".into();
            continue;
        }
        if negative == positive || negative == perception_text.trim() {
            last_reason = "mutation does not differ from the positive".into();
            continue;
        }
        return Ok(PerceptionPair {
            problem_id: problem.id.clone(),
            positive_text: positive,
            negative_text: negative.clone(),
            mutation_note: mutation_note(perception_text, &negative),
        });
    }
    Err(MutationError::GenerationInvalid(last_reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sim::{SimBackend, SimScript};
    use crate::labeler::{LabelOrigin, StepVerdict};
    use crate::problem::AnswerKindTag;
    use crate::trace::{Step, Trace};

    /// Minimal sample with `steps` full-solution steps; when `error_at` is
    /// set the verdicts truncate there.
    fn sample(id: &str, source: &str, steps: usize, error_at: Option<usize>) -> LabeledSample {
        let perception = vec![Step::new(Phase::Perception, 1, "see").unwrap()];
        let reasoning: Vec<Step> = (1..steps)
            .map(|i| Step::new(Phase::Reasoning, i, "think").unwrap())
            .collect();
        let trace = Trace::new(perception, reasoning, "\\boxed{A}".into()).unwrap();
        let retained = error_at.unwrap_or(steps);
        let verdicts: Vec<StepVerdict> = (1..=retained)
            .map(|i| StepVerdict {
                step_index: i,
                phase: trace.phase_of(i).unwrap(),
                label: if error_at == Some(i) {
                    StepLabel::Incorrect
                } else {
                    StepLabel::Correct
                },
                origin: LabelOrigin::Judge,
                mc_score: None,
                judge_rationale: None,
            })
            .collect();
        LabeledSample {
            problem_id: id.into(),
            source: source.into(),
            trace,
            verdicts,
            sample_label: if error_at.is_some() {
                SampleLabel::HasIncorrect
            } else {
                SampleLabel::AllCorrect
            },
            error_phase: error_at.map(|i| if i == 1 { Phase::Perception } else { Phase::Reasoning }),
        }
    }

    #[test]
    fn stats_average_and_fractions() {
        let samples = vec![sample("a", "s1", 4, None), sample("b", "s1", 5, None)];
        let stats = compute_stats(&samples, &[]);
        assert_eq!(stats.total.avg_steps_per_solution, 4.5);
        assert_eq!(stats.total.training_samples, 2);
        assert_eq!(stats.total.incorrect_sample_fraction, 0.0);

        let samples = vec![
            sample("a", "s1", 4, Some(2)),
            sample("b", "s1", 4, Some(1)),
            sample("c", "s2", 4, Some(3)),
            sample("d", "s2", 4, None),
        ];
        let stats = compute_stats(&samples, &[]);
        assert_eq!(stats.total.incorrect_sample_fraction, 0.75);
        assert_eq!(
            stats.total.correct_steps + stats.total.incorrect_steps,
            stats.total.total_steps
        );
        // 1 perception error (b), 2 reasoning errors (a, c)
        assert!((stats.total.perception_error_fraction - 1.0 / 3.0).abs() < 1e-12);
        assert!((stats.total.reasoning_error_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert!(
            (stats.total.perception_error_fraction + stats.total.reasoning_error_fraction - 1.0)
                .abs()
                < 1e-12
        );

        let discards = vec![DiscardRecord {
            problem_id: "x".into(),
            source: "s1".into(),
            reason: "mc disagreement".into(),
        }];
        let stats = compute_stats(&samples, &discards);
        assert_eq!(stats.per_source["s1"].valid_samples, 3);
        assert_eq!(stats.per_source["s1"].discarded_samples, 1);
        assert_eq!(stats.per_source["s1"].training_samples, 2);
        assert_eq!(stats.total.valid_samples, 5);
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let mut samples = vec![
            sample("a", "s1", 4, Some(2)),
            sample("b", "s2", 5, None),
            sample("c", "s1", 3, Some(1)),
        ];
        let forward = compute_stats(&samples, &[]);
        samples.reverse();
        let backward = compute_stats(&samples, &[]);
        assert_eq!(forward, backward);
    }

    #[test]
    fn balance_11_11_fixture() {
        // non-majority: 10 all-correct + 2 has-incorrect;
        // majority: 1 all-correct + 50 has-incorrect
        let mut samples = Vec::new();
        for i in 0..10 {
            samples.push(sample(&format!("n{i}"), "other", 3, None));
        }
        for i in 0..2 {
            samples.push(sample(&format!("ni{i}"), "other", 3, Some(1)));
        }
        samples.push(sample("m0", "major", 3, None));
        for i in 0..50 {
            samples.push(sample(&format!("mi{i}"), "major", 3, Some(2)));
        }
        let balanced = balance(&samples, "major", 17).unwrap();
        let all_correct = balanced
            .iter()
            .filter(|s| s.sample_label == SampleLabel::AllCorrect)
            .count();
        let has_incorrect = balanced
            .iter()
            .filter(|s| s.sample_label == SampleLabel::HasIncorrect)
            .count();
        assert_eq!(all_correct, 11);
        assert_eq!(has_incorrect, 11);
        let majority_incorrect = balanced
            .iter()
            .filter(|s| s.source == "major" && s.sample_label == SampleLabel::HasIncorrect)
            .count();
        assert_eq!(majority_incorrect, 9);

        // deterministic given seed; different seed picks a different subset
        let again = balance(&samples, "major", 17).unwrap();
        assert_eq!(balanced, again);
        let ids = |v: &[LabeledSample]| -> Vec<String> {
            v.iter().map(|s| s.problem_id.clone()).collect()
        };
        let other_seed = balance(&samples, "major", 18).unwrap();
        assert_eq!(other_seed.len(), balanced.len());
        assert_ne!(ids(&other_seed), ids(&balanced));
    }

    #[test]
    fn balance_fixed_point_and_infeasible() {
        let samples = vec![
            sample("a", "other", 3, None),
            sample("b", "major", 3, Some(1)),
        ];
        let balanced = balance(&samples, "major", 1).unwrap();
        assert_eq!(balanced, samples);

        // more non-majority incorrect than all-correct samples
        let samples = vec![
            sample("a", "other", 3, Some(1)),
            sample("b", "other", 3, Some(1)),
            sample("c", "other", 3, None),
            sample("d", "major", 3, Some(1)),
        ];
        assert!(matches!(
            balance(&samples, "major", 1),
            Err(BalanceError::Infeasible { .. })
        ));
        assert!(matches!(
            balance(&samples, "absent", 1),
            Err(BalanceError::MajoritySourceMissing(_))
        ));
    }

    #[test]
    fn training_records_mirror_verdicts() {
        let problems = BTreeMap::new();
        let all_correct = sample("a", "s", 3, None);
        let records = export_training_records(&[all_correct], &problems, "prm-v1", false);
        assert_eq!(records[0].rounds.len(), 3);
        assert!(records[0].rounds.iter().all(|r| r.target == "+"));

        let truncated = sample("b", "s", 4, Some(2));
        let records =
            export_training_records(std::slice::from_ref(&truncated), &problems, "prm-v1", false);
        let targets: Vec<&str> = records[0].rounds.iter().map(|r| r.target.as_str()).collect();
        assert_eq!(targets, vec!["+", "-"]);

        // masked perception rounds keep targets but lose supervision
        let masked = export_training_records(&[truncated], &problems, "prm-v1", true);
        assert!(!masked[0].rounds[0].supervised);
        assert!(masked[0].rounds[1].supervised);

        // round count equals retained verdict count over a mixed fixture
        let fixture = vec![
            sample("c", "s", 5, Some(3)),
            sample("d", "s", 2, None),
            sample("e", "s", 6, Some(1)),
        ];
        let records = export_training_records(&fixture, &problems, "prm-v1", false);
        let rounds: usize = records.iter().map(|r| r.rounds.len()).sum();
        let verdicts: usize = fixture.iter().map(|s| s.verdicts.len()).sum();
        assert_eq!(rounds, verdicts);
        // prefix property: dropping the last round leaves all-plus targets
        for record in &records {
            for round in &record.rounds[..record.rounds.len() - 1] {
                assert_eq!(round.target, "+");
            }
        }
    }

    fn mutation_problem() -> Problem {
        Problem {
            id: "p9".into(),
            source: "puzzle".into(),
            image_ref: None,
            question: "what color is the middle circle?".into(),
            options: None,
            answer: "red".into(),
            answer_kind: AnswerKindTag::FreeText,
            solutions: vec![],
            perception: None,
        }
    }

    #[tokio::test]
    async fn mutation_pair_from_scripted_generator() {
        let problem = mutation_problem();
        let original = "the middle circle is red and the outer ring is blue";
        let mut script = SimScript::default();
        script.script_completions(
            &prompts::rephrase_request(&problem, original),
            [("a red circle sits in the middle inside a blue outer ring", None)],
        );
        script.script_completions(
            &prompts::mutate_request(&problem, original),
            [("the middle circle is green and the outer ring is blue", None)],
        );
        let backend = SimBackend::new(script, 0);
        let pair = mutate_perception(&problem, original, &backend).await.unwrap();
        assert_ne!(pair.positive_text, pair.negative_text);
        assert!(pair.mutation_note.starts_with("attribute"), "{}", pair.mutation_note);
        assert!(pair.mutation_note.contains("red"));
        assert!(pair.mutation_note.contains("green"));
    }

    #[tokio::test]
    async fn echoed_mutation_is_invalid() {
        let problem = mutation_problem();
        let original = "the middle circle is red";
        let mut script = SimScript::default();
        script.script_completions(
            &prompts::rephrase_request(&problem, original),
            [(original, None)],
        );
        script.script_completions(
            &prompts::mutate_request(&problem, original),
            [(original, None)],
        );
        let backend = SimBackend::new(script, 0);
        assert!(matches!(
            mutate_perception(&problem, original, &backend).await,
            Err(MutationError::GenerationInvalid(_))
        ));
    }
}
