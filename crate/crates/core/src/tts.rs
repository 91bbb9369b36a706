//! PRM-guided test-time scaling.
//!
//! Four ways to spend extra inference compute on one problem:
//!
//! - guided greedy: sample N candidate next steps, keep the one the PRM
//!   scores highest, repeat;
//! - one-shot: sample N full solutions, score each whole solution once;
//! - step aggregation: sample N full solutions, score every step, rank by
//!   mean step score;
//! - majority: sample N full solutions, vote on the extracted answers.
//!
//! Score strategies select the argmax aggregate with lowest-index tie-break.
//! Unparseable candidates keep their slot with aggregate 0 so N and the
//! request accounting stay stable.

use futures::future::join_all;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answers::{
    extract_final_answer, majority_vote, AnswerKind, ExtractError,
    NormalizedAnswer,
};
use crate::backends::{approx_tokens, Backend, BackendError, ChatRequest, SamplingParams};
use crate::problem::Problem;
use crate::prompts;
use crate::seeds;
use crate::trace::{find_ascii_ci, parse_trace, render_prefix, Trace, TraceSchema};

/// Selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    OneShot,
    StepAgg,
    Majority,
}

// discriminant order, for use as a map key
impl PartialOrd for Strategy {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Strategy {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Strategy::Greedy => "greedy",
            Strategy::OneShot => "one-shot",
            Strategy::StepAgg => "step-agg",
            Strategy::Majority => "majority",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "one-shot" | "oneshot" => Ok(Strategy::OneShot),
            "step-agg" | "step-aggregation" => Ok(Strategy::StepAgg),
            "majority" => Ok(Strategy::Majority),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// PRM score for one step prefix of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub step_index: usize,
    pub p_plus: f64,
}

/// One candidate with its scores and extracted answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSolution {
    pub candidate_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Trace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_scores: Vec<StepScore>,
    pub aggregate: f64,
    pub answer: Result<NormalizedAnswer, ExtractError>,
    /// Set when the candidate could not be parsed and its aggregate was
    /// forced to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

/// Request accounting for one outcome. Token counts are estimates when the
/// backend reports no usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Accounting {
    pub policy_calls: u64,
    pub prm_calls: u64,
    pub tokens: u64,
}

impl Accounting {
    fn charge_generate(&mut self, request: &ChatRequest, responses: &[String]) {
        self.policy_calls += 1;
        self.tokens += approx_tokens(&request.system_text) + approx_tokens(&request.user_text);
        self.tokens += responses.iter().map(|r| approx_tokens(r)).sum::<u64>();
    }

    fn charge_score(&mut self, request: &ChatRequest) {
        self.prm_calls += 1;
        self.tokens +=
            approx_tokens(&request.system_text) + approx_tokens(&request.user_text) + 1;
    }
}

/// Result of one strategy run on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsOutcome {
    pub strategy: Strategy,
    pub n: u32,
    pub candidates: Vec<ScoredSolution>,
    pub selected_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_answer: Option<NormalizedAnswer>,
    /// No candidate produced a usable answer (or greedy hit its step cap);
    /// the selection is best-effort.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    pub accounting: Accounting,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TtsError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("all candidate next steps were empty after boundary trimming")]
    NoProgress { partial_text: String },
    #[error("invalid run parameters: {0}")]
    InvalidParams(String),
}

/// Index of the maximal score, lowest index on ties. NaN never wins.
fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, score) in scores.into_iter().enumerate() {
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Answer for a raw candidate text: the last boxed expression, else the
/// answer tag body, else the whole text.
fn candidate_answer(
    text: &str,
    schema: &TraceSchema,
    kind: &AnswerKind,
) -> Result<NormalizedAnswer, ExtractError> {
    crate::answers::extract_answer_in_solution(text, schema, kind)
}

fn finish_selection(
    strategy: Strategy,
    n: u32,
    candidates: Vec<ScoredSolution>,
    accounting: Accounting,
) -> TtsOutcome {
    let selected_index = argmax(candidates.iter().map(|c| c.aggregate));
    let selected_answer = candidates[selected_index].answer.clone().ok();
    let degraded = candidates.iter().all(|c| c.answer.is_err());
    TtsOutcome {
        strategy,
        n,
        candidates,
        selected_index,
        selected_answer,
        degraded,
        accounting,
    }
}

/// Best-of-N with one whole-solution PRM score per candidate (the PRM used
/// as an outcome reward model). `prm_calls == n` exactly.
pub async fn run_one_shot(
    problem: &Problem,
    policy: &dyn Backend,
    prm: &dyn Backend,
    schema: &TraceSchema,
    params: SamplingParams,
) -> Result<TtsOutcome, TtsError> {
    let n = params.n;
    let mut accounting = Accounting::default();
    let request = prompts::solution_request(problem, schema, params);
    let texts = policy.generate(&request).await?;
    accounting.charge_generate(&request, &texts);

    let kind = problem.answer_kind();
    let score_requests: Vec<ChatRequest> = texts
        .iter()
        .map(|text| prompts::prm_one_shot_request(problem, text))
        .collect();
    let scores = join_all(score_requests.iter().map(|r| prm.choice_probability(r)))
        .await
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    for request in &score_requests {
        accounting.charge_score(request);
    }

    let candidates = texts
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (text, probs))| {
            let answer = candidate_answer(&text, schema, &kind);
            let p_plus = probs.p_plus().unwrap_or(0.0);
            let flagged = answer.is_err();
            ScoredSolution {
                candidate_index: i,
                trace: parse_trace(&text, schema).ok(),
                text,
                step_scores: Vec::new(),
                aggregate: if flagged { 0.0 } else { p_plus },
                answer,
                flagged,
            }
        })
        .collect();
    Ok(finish_selection(Strategy::OneShot, n, candidates, accounting))
}

/// Best-of-N ranking candidates by the mean of per-step PRM scores.
/// `prm_calls == Σ_j T_j` over parseable candidates.
pub async fn run_step_aggregation(
    problem: &Problem,
    policy: &dyn Backend,
    prm: &dyn Backend,
    schema: &TraceSchema,
    params: SamplingParams,
) -> Result<TtsOutcome, TtsError> {
    let n = params.n;
    let mut accounting = Accounting::default();
    let request = prompts::solution_request(problem, schema, params);
    let texts = policy.generate(&request).await?;
    accounting.charge_generate(&request, &texts);

    let kind = problem.answer_kind();
    let parsed: Vec<Option<Trace>> = texts.iter().map(|t| parse_trace(t, schema).ok()).collect();

    // one request per (candidate, step prefix), scored concurrently,
    // reassembled in candidate order
    let mut requests: Vec<(usize, usize, ChatRequest)> = Vec::new();
    for (i, trace) in parsed.iter().enumerate() {
        if let Some(trace) = trace {
            for step in 1..=trace.total_steps() {
                let prefix = render_prefix(trace, step, schema)
                    .expect("prefix length bounded by total_steps");
                requests.push((i, step, prompts::prm_step_request(problem, &prefix, step)));
            }
        }
    }
    let scores = join_all(requests.iter().map(|(_, _, r)| prm.choice_probability(r)))
        .await
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    for (_, _, request) in &requests {
        accounting.charge_score(request);
    }

    let mut per_candidate: Vec<Vec<StepScore>> = vec![Vec::new(); texts.len()];
    for ((i, step, _), probs) in requests.iter().zip(scores) {
        per_candidate[*i].push(StepScore {
            step_index: *step,
            p_plus: probs.p_plus().unwrap_or(0.0),
        });
    }

    let candidates = texts
        .into_iter()
        .zip(parsed)
        .zip(per_candidate)
        .enumerate()
        .map(|(i, ((text, trace), step_scores))| {
            let (answer, flagged) = match &trace {
                Some(t) => (extract_final_answer(&t.final_answer_text, &kind), false),
                None => (candidate_answer(&text, schema, &kind), true),
            };
            let aggregate = if flagged || step_scores.is_empty() {
                0.0
            } else {
                step_scores.iter().map(|s| s.p_plus).sum::<f64>() / step_scores.len() as f64
            };
            ScoredSolution {
                candidate_index: i,
                trace,
                text,
                step_scores,
                aggregate,
                answer,
                flagged,
            }
        })
        .collect();
    Ok(finish_selection(Strategy::StepAgg, n, candidates, accounting))
}

/// Trims a raw next-step candidate at the schema's step boundary. A candidate
/// that opens the answer tag before the boundary keeps the whole answer tag.
fn trim_to_boundary(text: &str, schema: &TraceSchema) -> String {
    let answer_pos = find_ascii_ci(text, &schema.answer_open, 0);
    let boundary_end = match schema.step_boundary {
        crate::trace::StepBoundary::CloseTag => schema.find_step_close(text, 0).map(|(_, end)| end),
        crate::trace::StepBoundary::BlankLine => text.find("\n\n"),
    };
    match (answer_pos, boundary_end) {
        (Some(a), Some(b)) if a < b => trim_through_answer(text, schema, a),
        (Some(a), None) => trim_through_answer(text, schema, a),
        (_, Some(end)) => text[..end].trim().to_string(),
        (None, None) => text.trim().to_string(),
    }
}

fn trim_through_answer(text: &str, schema: &TraceSchema, answer_pos: usize) -> String {
    match find_ascii_ci(text, &schema.answer_close, answer_pos) {
        Some(close) => text[..close + schema.answer_close.len()].trim().to_string(),
        None => text.trim().to_string(),
    }
}

fn is_terminal(step_text: &str, schema: &TraceSchema) -> bool {
    find_ascii_ci(step_text, &schema.answer_open, 0).is_some() || step_text.contains("\\boxed{")
}

/// Stepwise decoding guided by the PRM: at each stage sample `params.n`
/// candidate next steps, score each extended prefix, append the argmax.
/// Stops at a final answer or after `max_steps` stages (degraded, with a
/// forced extraction attempt).
pub async fn run_guided_greedy(
    problem: &Problem,
    policy: &dyn Backend,
    prm: &dyn Backend,
    schema: &TraceSchema,
    params: SamplingParams,
    max_steps: usize,
) -> Result<TtsOutcome, TtsError> {
    if max_steps < 1 {
        return Err(TtsError::InvalidParams("max_steps must be >= 1".into()));
    }
    let n = params.n;
    let kind = problem.answer_kind();
    let mut accounting = Accounting::default();
    let mut partial = String::new();
    let mut chosen_scores: Vec<StepScore> = Vec::new();
    let mut finished = false;

    for step_ordinal in 1..=max_steps {
        let request = prompts::next_step_request(problem, &partial, schema, params.clone());
        let texts = policy.generate(&request).await?;
        accounting.charge_generate(&request, &texts);

        let trimmed: Vec<String> = texts.iter().map(|t| trim_to_boundary(t, schema)).collect();
        if trimmed.iter().all(|t| t.is_empty()) {
            return Err(TtsError::NoProgress {
                partial_text: partial,
            });
        }

        let extended: Vec<String> = trimmed
            .iter()
            .map(|t| {
                if partial.is_empty() {
                    t.clone()
                } else {
                    format!("{partial}\n{t}")
                }
            })
            .collect();
        let score_requests: Vec<ChatRequest> = extended
            .iter()
            .map(|prefix| prompts::prm_step_request(problem, prefix, step_ordinal))
            .collect();
        let probs = join_all(score_requests.iter().map(|r| prm.choice_probability(r)))
            .await
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        for request in &score_requests {
            accounting.charge_score(request);
        }

        // empty candidates stay out of the argmax
        let scores: Vec<f64> = trimmed
            .iter()
            .zip(&probs)
            .map(|(t, p)| {
                if t.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    p.p_plus().unwrap_or(0.0)
                }
            })
            .collect();
        let chosen = argmax(scores.iter().copied());
        partial = extended[chosen].clone();
        chosen_scores.push(StepScore {
            step_index: step_ordinal,
            p_plus: probs[chosen].p_plus().unwrap_or(0.0),
        });
        if is_terminal(&trimmed[chosen], schema) {
            finished = true;
            break;
        }
    }

    let answer = candidate_answer(&partial, schema, &kind);
    let aggregate = if chosen_scores.is_empty() {
        0.0
    } else {
        chosen_scores.iter().map(|s| s.p_plus).sum::<f64>() / chosen_scores.len() as f64
    };
    let selected_answer = answer.clone().ok();
    let degraded = !finished || selected_answer.is_none();
    let path = ScoredSolution {
        candidate_index: 0,
        trace: parse_trace(&partial, schema).ok(),
        text: partial,
        step_scores: chosen_scores,
        aggregate,
        answer,
        flagged: degraded,
    };
    Ok(TtsOutcome {
        strategy: Strategy::Greedy,
        n,
        candidates: vec![path],
        selected_index: 0,
        selected_answer,
        degraded,
        accounting,
    })
}

/// Self-consistency: vote over extracted answers; the representative is the
/// first candidate carrying the winning answer. No PRM involved.
pub async fn run_majority(
    problem: &Problem,
    policy: &dyn Backend,
    schema: &TraceSchema,
    params: SamplingParams,
) -> Result<TtsOutcome, TtsError> {
    let n = params.n;
    let mut accounting = Accounting::default();
    let request = prompts::solution_request(problem, schema, params);
    let texts = policy.generate(&request).await?;
    accounting.charge_generate(&request, &texts);

    let kind = problem.answer_kind();
    let candidates: Vec<ScoredSolution> = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let answer = candidate_answer(&text, schema, &kind);
            let flagged = answer.is_err();
            ScoredSolution {
                candidate_index: i,
                trace: parse_trace(&text, schema).ok(),
                text,
                step_scores: Vec::new(),
                aggregate: 0.0,
                answer,
                flagged,
            }
        })
        .collect();

    let voted: Vec<NormalizedAnswer> = candidates
        .iter()
        .filter_map(|c| c.answer.clone().ok())
        .collect();
    let (selected_index, selected_answer, degraded) = match majority_vote(&voted) {
        Ok(winner) => {
            let index = candidates
                .iter()
                .position(|c| c.answer.as_ref().map(|a| a.value == winner.value).unwrap_or(false))
                .unwrap_or(0);
            (index, Some(winner), false)
        }
        Err(_) => (0, None, true),
    };
    Ok(TtsOutcome {
        strategy: Strategy::Majority,
        n,
        candidates,
        selected_index,
        selected_answer,
        degraded,
        accounting,
    })
}

/// Candidate pool for BoN@k resampling: the per-candidate scores and graded
/// answers of a full N-sample run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonCandidate {
    pub one_shot_score: f64,
    pub step_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub is_correct: bool,
}

impl BonCandidate {
    fn step_mean(&self) -> f64 {
        if self.step_scores.is_empty() {
            0.0
        } else {
            self.step_scores.iter().sum::<f64>() / self.step_scores.len() as f64
        }
    }
}

/// Per-strategy accuracy estimates from subsampled pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonAccuracy {
    pub one_shot: f64,
    pub step_agg: f64,
    pub majority: f64,
    pub subsets: u64,
    /// All C(N,k) subsets were enumerated instead of sampled.
    pub exhaustive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("subset size {k} exceeds pool size {n}")]
pub struct KTooLarge {
    pub k: usize,
    pub n: usize,
}

fn select_one_shot(pool: &[BonCandidate], subset: &[usize]) -> bool {
    let winner = subset[argmax(subset.iter().map(|&i| pool[i].one_shot_score))];
    pool[winner].is_correct
}

fn select_step_agg(pool: &[BonCandidate], subset: &[usize]) -> bool {
    let winner = subset[argmax(subset.iter().map(|&i| pool[i].step_mean()))];
    pool[winner].is_correct
}

fn select_majority(pool: &[BonCandidate], subset: &[usize]) -> bool {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for &i in subset {
        let Some(answer) = pool[i].answer.as_deref() else {
            continue;
        };
        match counts.iter_mut().find(|(a, _)| *a == answer) {
            Some((_, c)) => *c += 1,
            None => counts.push((answer, 1)),
        }
    }
    let Some(max) = counts.iter().map(|(_, c)| *c).max() else {
        return false;
    };
    // counts is in first-occurrence order, so the first maximum is the
    // tie-break winner
    let winner = counts
        .iter()
        .find(|(_, c)| *c == max)
        .map(|(a, _)| *a)
        .expect("max came from counts");
    subset
        .iter()
        .find(|&&i| pool[i].answer.as_deref() == Some(winner))
        .map(|&i| pool[i].is_correct)
        .unwrap_or(false)
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result = 1u64;
    for i in 0..k {
        result = result.saturating_mul(n - i) / (i + 1);
    }
    result
}

/// Accuracy of each strategy when only `k` of the pool's candidates are
/// available. When C(N,k) fits inside `trials`, all subsets are enumerated
/// exactly once; otherwise `trials` subsets are drawn without replacement
/// per trial, seeded. Subsets preserve pool order so the lowest-index
/// tie-break matches the full-pool rule.
pub fn bon_subsample(
    pool: &[BonCandidate],
    k: usize,
    seed: u64,
    trials: u32,
) -> Result<BonAccuracy, KTooLarge> {
    let n = pool.len();
    if k > n || k == 0 {
        return Err(KTooLarge { k, n });
    }
    let mut one_shot = 0u64;
    let mut step_agg = 0u64;
    let mut majority = 0u64;
    let mut subsets = 0u64;

    let total = binomial(n as u64, k as u64);
    let exhaustive = total <= trials as u64;
    let mut tally = |subset: &[usize]| {
        one_shot += select_one_shot(pool, subset) as u64;
        step_agg += select_step_agg(pool, subset) as u64;
        majority += select_majority(pool, subset) as u64;
    };

    if exhaustive {
        // lexicographic combinations
        let mut subset: Vec<usize> = (0..k).collect();
        loop {
            tally(&subset);
            subsets += 1;
            let mut i = k;
            while i > 0 {
                i -= 1;
                if subset[i] != i + n - k {
                    subset[i] += 1;
                    for j in i + 1..k {
                        subset[j] = subset[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    subset.clear();
                }
            }
            if subset.is_empty() {
                break;
            }
        }
    } else {
        let mut rng = seeds::stream_rng(seed, "bon-subsample", &format!("k={k}"));
        let mut indices: Vec<usize> = (0..n).collect();
        for _ in 0..trials {
            indices.shuffle(&mut rng);
            let mut subset: Vec<usize> = indices[..k].to_vec();
            subset.sort_unstable();
            tally(&subset);
            subsets += 1;
        }
    }

    let rate = |hits: u64| hits as f64 / subsets as f64;
    Ok(BonAccuracy {
        one_shot: rate(one_shot),
        step_agg: rate(step_agg),
        majority: rate(majority),
        subsets,
        exhaustive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sim::{SimBackend, SimScript};
    
    use crate::problem::AnswerKindTag;

    fn problem() -> Problem {
        Problem {
            id: "p1".into(),
            source: "puzzle".into(),
            image_ref: None,
            question: "pick one".into(),
            options: Some(vec!["w".into(), "x".into(), "y".into(), "z".into()]),
            answer: "B".into(),
            answer_kind: AnswerKindTag::MultipleChoice,
            solutions: vec![],
            perception: None,
        }
    }

    fn schema() -> TraceSchema {
        TraceSchema::perception_reasoning()
    }

    fn solution_text(answer: char) -> String {
        format!(
            "[Perception]\n<step_1>\nlook\n</step_1>\n[Reasoning]\n<step_1>\nthink\n</step_1>\n<correct_answer>\\boxed{{{answer}}}</correct_answer>\n"
        )
    }

    /// Scripts one policy generate plus one-shot PRM scores per candidate.
    fn one_shot_setup(answers: &[char], scores: &[f64]) -> (SimBackend, SimBackend, SamplingParams) {
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(answers.len() as u32);
        let mut policy = SimScript::default();
        let texts: Vec<String> = answers.iter().map(|&a| solution_text(a)).collect();
        policy.script_completions(
            &prompts::solution_request(&p, &s, params.clone()),
            texts.iter().map(|t| (t.clone(), None)),
        );
        let mut prm = SimScript::default();
        for (text, &score) in texts.iter().zip(scores) {
            prm.script_p_plus(&prompts::prm_one_shot_request(&p, text), score);
        }
        (SimBackend::new(policy, 0), SimBackend::new(prm, 0), params)
    }

    #[tokio::test]
    async fn one_shot_selects_argmax() {
        let (policy, prm, params) = one_shot_setup(&['A', 'B', 'C'], &[0.2, 0.9, 0.5]);
        let outcome = run_one_shot(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert_eq!(outcome.selected_index, 1);
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "B");
        assert_eq!(outcome.accounting.prm_calls, 3);
        assert_eq!(outcome.accounting.policy_calls, 1);
        assert!(!outcome.degraded);
    }

    #[tokio::test]
    async fn one_shot_single_candidate_and_ties() {
        let (policy, prm, params) = one_shot_setup(&['C'], &[0.01]);
        let outcome = run_one_shot(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert_eq!(outcome.selected_index, 0);
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "C");

        let (policy, prm, params) = one_shot_setup(&['A', 'B'], &[0.7, 0.7]);
        let outcome = run_one_shot(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert_eq!(outcome.selected_index, 0);
    }

    #[tokio::test]
    async fn every_strategy_is_deterministic_under_sim() {
        // unscripted backends: scores and completions come from the seeded
        // fallback, so a repeat run must reproduce the outcome bit for bit
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(3);
        let policy = SimBackend::new(SimScript::default(), 7);
        let prm = SimBackend::new(SimScript::default(), 8);
        for _ in 0..2 {
            let a = run_one_shot(&p, &policy, &prm, &s, params.clone()).await.unwrap();
            let b = run_one_shot(&p, &policy, &prm, &s, params.clone()).await.unwrap();
            assert_eq!(a, b);
        }
        let a = run_step_aggregation(&p, &policy, &prm, &s, params.clone()).await.unwrap();
        let b = run_step_aggregation(&p, &policy, &prm, &s, params.clone()).await.unwrap();
        assert_eq!(a, b);
        let a = run_majority(&p, &policy, &s, params.clone()).await.unwrap();
        let b = run_majority(&p, &policy, &s, params.clone()).await.unwrap();
        assert_eq!(a, b);
        let a = run_guided_greedy(&p, &policy, &prm, &s, params.clone(), 5).await.unwrap();
        let b = run_guided_greedy(&p, &policy, &prm, &s, params, 5).await.unwrap();
        assert_eq!(a, b);

        // and with scripted scores
        let (policy, prm, params) = one_shot_setup(&['A', 'B', 'D'], &[0.3, 0.8, 0.5]);
        let a = run_one_shot(&problem(), &policy, &prm, &schema(), params.clone())
            .await
            .unwrap();
        let b = run_one_shot(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert_eq!(a, b);
    }

    fn step_agg_setup(
        per_candidate: &[(char, &[f64])],
    ) -> (SimBackend, SimBackend, SamplingParams) {
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(per_candidate.len() as u32);
        let mut policy = SimScript::default();
        let texts: Vec<String> = per_candidate
            .iter()
            .map(|(a, step_scores)| {
                // one perception step plus enough reasoning steps; bodies
                // carry the candidate letter so prefixes stay distinct
                let mut text =
                    format!("[Perception]\n<step_1>\nlook toward {a}\n</step_1>\n[Reasoning]\n");
                for i in 1..step_scores.len() {
                    text.push_str(&format!("<step_{i}>\nthink {a}{i}\n</step_{i}>\n"));
                }
                text.push_str(&format!("<correct_answer>\\boxed{{{a}}}</correct_answer>\n"));
                text
            })
            .collect();
        policy.script_completions(
            &prompts::solution_request(&p, &s, params.clone()),
            texts.iter().map(|t| (t.clone(), None)),
        );
        let mut prm = SimScript::default();
        for (text, (_, step_scores)) in texts.iter().zip(per_candidate) {
            let trace = parse_trace(text, &s).unwrap();
            assert_eq!(trace.total_steps(), step_scores.len());
            for step in 1..=trace.total_steps() {
                let prefix = render_prefix(&trace, step, &s).unwrap();
                prm.script_p_plus(
                    &prompts::prm_step_request(&p, &prefix, step),
                    step_scores[step - 1],
                );
            }
        }
        (SimBackend::new(policy, 0), SimBackend::new(prm, 0), params)
    }

    #[tokio::test]
    async fn step_aggregation_means_and_selection() {
        let (policy, prm, params) = step_agg_setup(&[('A', &[0.9, 0.5, 0.7])]);
        let outcome = run_step_aggregation(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert!((outcome.candidates[0].aggregate - 0.7).abs() < 1e-12);
        assert_eq!(outcome.accounting.prm_calls, 3);

        let (policy, prm, params) = step_agg_setup(&[('A', &[1.0, 1.0])]);
        let outcome = run_step_aggregation(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert_eq!(outcome.candidates[0].aggregate, 1.0);

        // mean comparison: 0.7 vs 0.75 picks the second candidate
        let (policy, prm, params) =
            step_agg_setup(&[('A', &[0.6, 0.8]), ('B', &[0.7, 0.8])]);
        let outcome = run_step_aggregation(&problem(), &policy, &prm, &schema(), params)
            .await
            .unwrap();
        assert!((outcome.candidates[0].aggregate - 0.7).abs() < 1e-12);
        assert!((outcome.candidates[1].aggregate - 0.75).abs() < 1e-12);
        assert_eq!(outcome.selected_index, 1);
        assert_eq!(outcome.accounting.prm_calls, 4);
        // aggregate bounded by min and max of its step scores
        for c in &outcome.candidates {
            let min = c.step_scores.iter().map(|s| s.p_plus).fold(f64::INFINITY, f64::min);
            let max = c
                .step_scores
                .iter()
                .map(|s| s.p_plus)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(c.aggregate >= min && c.aggregate <= max);
        }
    }

    #[tokio::test]
    async fn step_aggregation_flags_unparseable_candidates() {
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(2);
        let mut policy = SimScript::default();
        let good = solution_text('B');
        let bad = "no structure at all \\boxed{A}".to_string();
        policy.script_completions(
            &prompts::solution_request(&p, &s, params.clone()),
            [(good.clone(), None), (bad, None)],
        );
        let mut prm = SimScript::default();
        let trace = parse_trace(&good, &s).unwrap();
        for step in 1..=trace.total_steps() {
            let prefix = render_prefix(&trace, step, &s).unwrap();
            prm.script_p_plus(&prompts::prm_step_request(&p, &prefix, step), 0.4);
        }
        let outcome = run_step_aggregation(
            &p,
            &SimBackend::new(policy, 0),
            &SimBackend::new(prm, 0),
            &s,
            params,
        )
        .await
        .unwrap();
        assert!(outcome.candidates[1].flagged);
        assert_eq!(outcome.candidates[1].aggregate, 0.0);
        // the unparseable candidate still has a graded answer via the box
        assert_eq!(outcome.candidates[1].answer.as_ref().unwrap().value, "A");
        assert_eq!(outcome.selected_index, 0);
        assert_eq!(outcome.accounting.prm_calls, 2);
    }

    #[tokio::test]
    async fn majority_votes_and_ties() {
        let p = problem();
        let s = schema();
        let run = |answers: Vec<char>| {
            let p = p.clone();
            let s = s.clone();
            async move {
                let params = SamplingParams::default().with_n(answers.len() as u32);
                let mut policy = SimScript::default();
                policy.script_completions(
                    &prompts::solution_request(&p, &s, params.clone()),
                    answers.iter().map(|&a| (solution_text(a), None)),
                );
                run_majority(&p, &SimBackend::new(policy, 0), &s, params)
                    .await
                    .unwrap()
            }
        };
        let outcome = run(vec!['B', 'B', 'A']).await;
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "B");
        assert_eq!(outcome.selected_index, 0);
        assert_eq!(outcome.accounting.prm_calls, 0);

        let outcome = run(vec!['C']).await;
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "C");

        // tie-break oracle: A and C tie at 2, A seen first
        let outcome = run(vec!['A', 'C', 'C', 'A']).await;
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "A");
        assert_eq!(outcome.selected_index, 0);
    }

    fn greedy_step_text(ordinal: usize, body: &str) -> String {
        format!("<step_{ordinal}>\n{body}\n</step_{ordinal}>")
    }

    #[tokio::test]
    async fn greedy_follows_per_step_argmax() {
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(2);
        let mut policy = SimScript::default();
        let mut prm = SimScript::default();

        // stage 1: candidates scored 0.1 / 0.8 -> pick index 1
        let c0 = greedy_step_text(1, "weak start");
        let c1 = greedy_step_text(1, "strong start");
        policy.script_completions(
            &prompts::next_step_request(&p, "", &s, params.clone()),
            [(c0.clone(), None), (c1.clone(), None)],
        );
        prm.script_p_plus(&prompts::prm_step_request(&p, &c0, 1), 0.1);
        prm.script_p_plus(&prompts::prm_step_request(&p, &c1, 1), 0.8);

        // stage 2: candidates scored 0.6 / 0.2 -> pick index 0, which answers
        let d0 = greedy_step_text(2, "so it is \\boxed{B}");
        let d1 = greedy_step_text(2, "keep going");
        policy.script_completions(
            &prompts::next_step_request(&p, &c1, &s, params.clone()),
            [(d0.clone(), None), (d1.clone(), None)],
        );
        let ext0 = format!("{c1}\n{d0}");
        let ext1 = format!("{c1}\n{d1}");
        prm.script_p_plus(&prompts::prm_step_request(&p, &ext0, 2), 0.6);
        prm.script_p_plus(&prompts::prm_step_request(&p, &ext1, 2), 0.2);

        let outcome = run_guided_greedy(
            &p,
            &SimBackend::new(policy, 0),
            &SimBackend::new(prm, 0),
            &s,
            params,
            8,
        )
        .await
        .unwrap();
        assert!(!outcome.degraded);
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "B");
        let scores: Vec<f64> = outcome.candidates[0]
            .step_scores
            .iter()
            .map(|s| s.p_plus)
            .collect();
        assert_eq!(scores, vec![0.8, 0.6]);
        assert_eq!(outcome.accounting.policy_calls, 2);
        assert_eq!(outcome.accounting.prm_calls, 4);
        assert!(outcome.candidates[0].text.contains("strong start"));
        assert!(!outcome.candidates[0].text.contains("weak start"));
    }

    #[tokio::test]
    async fn greedy_terminates_on_first_step_answer() {
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(1);
        let mut policy = SimScript::default();
        let mut prm = SimScript::default();
        let c0 = greedy_step_text(1, "the answer is \\boxed{B}");
        policy.script_completions(
            &prompts::next_step_request(&p, "", &s, params.clone()),
            [(c0.clone(), None)],
        );
        prm.script_p_plus(&prompts::prm_step_request(&p, &c0, 1), 0.9);
        let outcome = run_guided_greedy(
            &p,
            &SimBackend::new(policy, 0),
            &SimBackend::new(prm, 0),
            &s,
            params,
            1,
        )
        .await
        .unwrap();
        assert!(!outcome.degraded);
        assert_eq!(outcome.accounting.policy_calls, 1);
        assert_eq!(outcome.selected_answer.as_ref().unwrap().value, "B");
    }

    #[tokio::test]
    async fn greedy_no_progress_and_max_steps() {
        let p = problem();
        let s = schema();
        let params = SamplingParams::default().with_n(2);
        let mut policy = SimScript::default();
        policy.script_completions(
            &prompts::next_step_request(&p, "", &s, params.clone()),
            [("", None), ("   ", None)],
        );
        let err = run_guided_greedy(
            &p,
            &SimBackend::new(policy, 0),
            &SimBackend::new(SimScript::default(), 0),
            &s,
            params.clone(),
            4,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, TtsError::NoProgress { .. }));

        // max_steps exhausted without an answer -> degraded outcome
        let mut policy = SimScript::default();
        let mut prm = SimScript::default();
        let c0 = greedy_step_text(1, "still thinking");
        policy.script_completions(
            &prompts::next_step_request(&p, "", &s, params.clone()),
            [(c0.clone(), None), (greedy_step_text(1, "other"), None)],
        );
        prm.script_p_plus(&prompts::prm_step_request(&p, &c0, 1), 0.9);
        prm.script_p_plus(
            &prompts::prm_step_request(&p, &greedy_step_text(1, "other"), 1),
            0.1,
        );
        let outcome = run_guided_greedy(
            &p,
            &SimBackend::new(policy, 0),
            &SimBackend::new(prm, 0),
            &s,
            params,
            1,
        )
        .await
        .unwrap();
        assert!(outcome.degraded);
        assert!(outcome.selected_answer.is_none());
    }

    #[test]
    fn trim_boundary_variants() {
        let s = schema();
        assert_eq!(
            trim_to_boundary("<step_2>\nbody\n</step_2>\n<step_3>more", &s),
            "<step_2>\nbody\n</step_2>"
        );
        assert_eq!(
            trim_to_boundary("<correct_answer>\\boxed{A}</correct_answer>\njunk", &s),
            "<correct_answer>\\boxed{A}</correct_answer>"
        );
        let mut blank = s.clone();
        blank.step_boundary = crate::trace::StepBoundary::BlankLine;
        assert_eq!(trim_to_boundary("first paragraph\n\nsecond", &blank), "first paragraph");
        assert_eq!(trim_to_boundary("no boundary here", &s), "no boundary here");
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let scores = [0.2, 0.9, 0.5, 0.9];
        let base = argmax(scores.iter().copied());
        for scale in [0.5, 2.0, 10.0] {
            assert_eq!(argmax(scores.iter().map(|s| s * scale)), base);
        }
        assert_eq!(base, 1);
    }

    fn pool(entries: &[(f64, &[f64], Option<&str>, bool)]) -> Vec<BonCandidate> {
        entries
            .iter()
            .map(|(one_shot, steps, answer, correct)| BonCandidate {
                one_shot_score: *one_shot,
                step_scores: steps.to_vec(),
                answer: answer.map(str::to_string),
                is_correct: *correct,
            })
            .collect()
    }

    #[test]
    fn bon_k_equals_n_reproduces_full_pool() {
        let pool = pool(&[
            (0.9, &[0.9], Some("B"), true),
            (0.95, &[0.2], Some("A"), false),
            (0.1, &[0.8], Some("B"), true),
        ]);
        let acc = bon_subsample(&pool, 3, 1, 100).unwrap();
        assert!(acc.exhaustive);
        assert_eq!(acc.subsets, 1);
        // full pool: one-shot picks index 1 (incorrect), step-agg picks index 0
        assert_eq!(acc.one_shot, 0.0);
        assert_eq!(acc.step_agg, 1.0);
        assert_eq!(acc.majority, 1.0);
    }

    #[test]
    fn bon_all_correct_pool_is_perfect() {
        let pool = pool(&[
            (0.5, &[0.5], Some("B"), true),
            (0.6, &[0.6], Some("B"), true),
            (0.7, &[0.7], Some("B"), true),
            (0.8, &[0.8], Some("B"), true),
        ]);
        for k in 1..=4 {
            let acc = bon_subsample(&pool, k, 3, 50).unwrap();
            assert_eq!(acc.one_shot, 1.0);
            assert_eq!(acc.step_agg, 1.0);
            assert_eq!(acc.majority, 1.0);
        }
    }

    #[test]
    fn bon_exhaustive_matches_manual_enumeration() {
        // N=4, k=2: six subsets, hand-enumerated one-shot winners
        let pool = pool(&[
            (0.9, &[0.9], Some("B"), true),
            (0.8, &[0.1], Some("A"), false),
            (0.7, &[0.95], Some("B"), true),
            (0.95, &[0.2], Some("C"), false),
        ]);
        let acc = bon_subsample(&pool, 2, 9, 100).unwrap();
        assert!(acc.exhaustive);
        assert_eq!(acc.subsets, 6);
        // subsets: {0,1}->0 T, {0,2}->0 T, {0,3}->3 F, {1,2}->1 F, {1,3}->3 F, {2,3}->3 F
        assert!((acc.one_shot - 2.0 / 6.0).abs() < 1e-12);
        // step-agg winners: {0,1}->0 T, {0,2}->2 T, {0,3}->0 T, {1,2}->2 T, {1,3}->3 F, {2,3}->2 T
        assert!((acc.step_agg - 5.0 / 6.0).abs() < 1e-12);
        assert!(bon_subsample(&pool, 5, 0, 10).is_err());
    }

    #[test]
    fn one_shot_beats_random_pick_on_separable_pools() {
        // PRM scripted 0.9 for correct candidates, 0.3 for incorrect: over
        // every correctness pattern with N <= 4, one-shot selection finds a
        // correct candidate whenever one exists, so its accuracy dominates a
        // random pick's expected accuracy
        for n in 1..=4usize {
            for pattern in 0..(1u32 << n) {
                let pool: Vec<BonCandidate> = (0..n)
                    .map(|i| {
                        let correct = pattern & (1 << i) != 0;
                        BonCandidate {
                            one_shot_score: if correct { 0.9 } else { 0.3 },
                            step_scores: vec![],
                            answer: Some(if correct { "B".into() } else { "A".into() }),
                            is_correct: correct,
                        }
                    })
                    .collect();
                let any_correct = pattern != 0;
                let selection = bon_subsample(&pool, n, 0, 8).unwrap().one_shot;
                let random_pick = pattern.count_ones() as f64 / n as f64;
                assert!(selection >= random_pick, "n={n} pattern={pattern:b}");
                if any_correct {
                    assert_eq!(selection, 1.0, "n={n} pattern={pattern:b}");
                }
            }
        }
    }

    #[test]
    fn bon_sampled_mode_is_deterministic() {
        let pool: Vec<BonCandidate> = (0..12)
            .map(|i| BonCandidate {
                one_shot_score: (i as f64) / 12.0,
                step_scores: vec![(i as f64) / 12.0],
                answer: Some(if i % 3 == 0 { "B".into() } else { "A".into() }),
                is_correct: i % 3 == 0,
            })
            .collect();
        // C(12,5) = 792 > 50 trials -> sampled path
        let a = bon_subsample(&pool, 5, 42, 50).unwrap();
        let b = bon_subsample(&pool, 5, 42, 50).unwrap();
        assert!(!a.exhaustive);
        assert_eq!(a, b);
        assert_eq!(a.subsets, 50);
    }
}

