//! Deterministic simulated backend.
//!
//! A [`SimScript`] maps request fingerprints to scripted completions and
//! choice probabilities. Unknown fingerprints fall back to a pseudo-random
//! generator seeded from (backend seed, fingerprint), so any two runs with
//! the same script, seed, and request produce byte-identical outputs.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    approx_tokens, Backend, BackendError, BudgetTracker, ChatRequest, ChoiceProbabilities,
    PLUS_TOKEN,
};
use crate::seeds;

/// One scripted completion; `is_correct` is bookkeeping for script authors
/// and is not consulted at lookup time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCompletion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
}

/// Scripted outputs for one request fingerprint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub completions: Vec<ScriptedCompletion>,
    /// Shortcut for a two-way `{"+","-"}` distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_plus: Option<f64>,
    /// Raw log-probabilities per candidate token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<BTreeMap<String, f64>>,
}

/// Fingerprint-keyed script, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimScript {
    #[serde(default)]
    pub entries: BTreeMap<String, ScriptEntry>,
}

impl SimScript {
    /// Content fingerprint of a request: prompts plus the sorted candidate
    /// set. Sampling knobs are deliberately excluded so one entry serves any
    /// `n` or temperature.
    pub fn fingerprint(request: &ChatRequest) -> String {
        let mut hasher = Sha256::new();
        hasher.update(request.system_text.as_bytes());
        hasher.update([0x1f]);
        hasher.update(request.user_text.as_bytes());
        hasher.update([0x1f]);
        if let Some(tokens) = &request.logprob_request {
            let mut sorted: Vec<&String> = tokens.iter().collect();
            sorted.sort();
            for t in sorted {
                hasher.update(t.as_bytes());
                hasher.update([0x1e]);
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn entry_mut(&mut self, request: &ChatRequest) -> &mut ScriptEntry {
        self.entries.entry(Self::fingerprint(request)).or_default()
    }

    /// Scripts `generate` for this request's fingerprint.
    pub fn script_completions<I, S>(&mut self, request: &ChatRequest, texts: I)
    where
        I: IntoIterator<Item = (S, Option<bool>)>,
        S: Into<String>,
    {
        self.entry_mut(request).completions = texts
            .into_iter()
            .map(|(text, is_correct)| ScriptedCompletion {
                text: text.into(),
                is_correct,
            })
            .collect();
    }

    /// Scripts `choice_probability` as a `{"+","-"}` pair.
    pub fn script_p_plus(&mut self, request: &ChatRequest, p_plus: f64) {
        self.entry_mut(request).p_plus = Some(p_plus);
    }

    /// Scripts raw candidate log-probabilities.
    pub fn script_logprobs(&mut self, request: &ChatRequest, pairs: &[(&str, f64)]) {
        self.entry_mut(request).logprobs = Some(
            pairs
                .iter()
                .map(|(token, lp)| (token.to_string(), *lp))
                .collect(),
        );
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

/// Deterministic stand-in for a served model.
pub struct SimBackend {
    script: SimScript,
    seed: u64,
    budget: std::sync::Arc<BudgetTracker>,
}

impl SimBackend {
    pub fn new(script: SimScript, seed: u64) -> Self {
        Self {
            script,
            seed,
            budget: BudgetTracker::unlimited(),
        }
    }

    pub fn with_budget(mut self, budget: std::sync::Arc<BudgetTracker>) -> Self {
        self.budget = budget;
        self
    }

    pub fn from_file(path: &Path, seed: u64) -> Result<Self, std::io::Error> {
        Ok(Self::new(SimScript::load(path)?, seed))
    }

    /// Fallback text for an unscripted generation. The reply shape follows
    /// the request: judge-style prompts get a valid analysis/conclusion
    /// block, next-step prompts get one more step tag (or the answer tag),
    /// and everything else gets a minimal well-formed trace. Assumes the
    /// default `<step_k>` dialect.
    fn synthesize_completion(&self, request: &ChatRequest, fingerprint: &str, index: u32) -> String {
        let mut rng = seeds::stream_rng(
            self.seed,
            "sim-generate",
            &format!("{fingerprint}/{index}"),
        );
        let user = &request.user_text;
        let open_tags = user.matches("<step_").count();

        if user.contains("<conclusion>") {
            // judge request: the embedded solution's step tags set the count
            let steps = open_tags.max(1);
            let incorrect = rng.random_bool(0.4);
            let reviewed = if incorrect {
                rng.random_range(1..=steps)
            } else {
                steps
            };
            let mut out = String::new();
            for i in 1..=reviewed {
                out.push_str(&format!("<analysis_{i}>\nstep {i} reviewed\n</analysis_{i}>\n"));
            }
            out.push_str(if incorrect {
                "<conclusion>\nIncorrect\n</conclusion>\n"
            } else {
                "<conclusion>\nCorrect\n</conclusion>\n"
            });
            return out;
        }

        let letter = (b'A' + rng.random_range(0..4u8)) as char;
        if user.contains("(one step tag)") {
            // next-step request: the format instructions hold four example
            // step tags; anything beyond them is the partial solution
            let k = open_tags.saturating_sub(4) + 1;
            if k > 2 {
                return format!("<correct_answer>\\boxed{{{letter}}}</correct_answer>\n");
            }
            let detail = rng.random_range(0..100u32);
            return format!("<step_{k}>\nnoted detail {detail}\n</step_{k}>\n");
        }

        let detail = rng.random_range(0..100u32);
        format!(
            "[Perception]\n<step_1>\nobserved detail {detail}\n</step_1>\n[Reasoning]\n<step_1>\npicking option {letter}\n</step_1>\n<correct_answer>\\boxed{{{letter}}}</correct_answer>\n"
        )
    }
}

#[async_trait]
impl Backend for SimBackend {
    async fn generate(&self, request: &ChatRequest) -> Result<Vec<String>, BackendError> {
        request.sampling.validate()?;
        self.budget.charge_request()?;
        let n = request.sampling.n as usize;
        let fingerprint = SimScript::fingerprint(request);
        let texts: Vec<String> = match self.script.entries.get(&fingerprint) {
            Some(entry) if !entry.completions.is_empty() => (0..n)
                .map(|i| entry.completions[i % entry.completions.len()].text.clone())
                .collect(),
            _ => (0..n as u32)
                .map(|i| self.synthesize_completion(request, &fingerprint, i))
                .collect(),
        };
        let sent = approx_tokens(&request.user_text) + approx_tokens(&request.system_text);
        let received: u64 = texts.iter().map(|t| approx_tokens(t)).sum();
        self.budget.record_transfer(
            (request.system_text.len() + request.user_text.len()) as u64,
            texts.iter().map(|t| t.len() as u64).sum(),
            sent + received,
        );
        Ok(texts)
    }

    async fn choice_probability(
        &self,
        request: &ChatRequest,
    ) -> Result<ChoiceProbabilities, BackendError> {
        let tokens = request.validate_choice()?.to_vec();
        self.budget.charge_request()?;
        let fingerprint = SimScript::fingerprint(request);
        let entry = self.script.entries.get(&fingerprint);

        let probs = match entry {
            Some(entry) if entry.logprobs.is_some() => {
                let table = entry.logprobs.as_ref().expect("checked above");
                let mut pairs = Vec::with_capacity(tokens.len());
                for token in &tokens {
                    let lp = table.get(token).ok_or_else(|| {
                        BackendError::CandidateMissing {
                            token: token.clone(),
                        }
                    })?;
                    pairs.push((token.clone(), *lp));
                }
                ChoiceProbabilities::from_logprobs(&pairs)
            }
            Some(entry) if entry.p_plus.is_some() => {
                let p = entry.p_plus.expect("checked above");
                if tokens.len() != 2 || !tokens.iter().any(|t| t == PLUS_TOKEN) {
                    return Err(BackendError::CandidateMissing {
                        token: PLUS_TOKEN.to_string(),
                    });
                }
                let pairs: Vec<(String, f64)> = tokens
                    .iter()
                    .map(|t| {
                        let prob = if t == PLUS_TOKEN { p } else { 1.0 - p };
                        (t.clone(), prob)
                    })
                    .collect();
                ChoiceProbabilities::from_probabilities(&pairs)
            }
            _ => {
                let mut rng = seeds::stream_rng(self.seed, "sim-choice", &fingerprint);
                let p: f64 = rng.random_range(0.0..1.0);
                let anchor = if tokens.iter().any(|t| t == PLUS_TOKEN) {
                    PLUS_TOKEN.to_string()
                } else {
                    tokens[0].clone()
                };
                let rest = (1.0 - p) / (tokens.len() as f64 - 1.0);
                let pairs: Vec<(String, f64)> = tokens
                    .iter()
                    .map(|t| (t.clone(), if *t == anchor { p } else { rest }))
                    .collect();
                ChoiceProbabilities::from_probabilities(&pairs)
            }
        };
        let sent = approx_tokens(&request.user_text) + approx_tokens(&request.system_text);
        self.budget.record_transfer(
            (request.system_text.len() + request.user_text.len()) as u64,
            1,
            sent + 1,
        );
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{SamplingParams, MINUS_TOKEN};

    fn request(user: &str, n: u32) -> ChatRequest {
        ChatRequest::new("sys", user).with_sampling(SamplingParams::default().with_n(n))
    }

    #[tokio::test]
    async fn scripted_completions_come_back_in_order() {
        let mut script = SimScript::default();
        let req = request("prompt", 3);
        script.script_completions(
            &req,
            [("one", None), ("two", None), ("three", Some(true))],
        );
        let backend = SimBackend::new(script, 0);
        let texts = backend.generate(&req).await.unwrap();
        assert_eq!(texts, vec!["one", "two", "three"]);
    }

    #[tokio::test]
    async fn n_zero_is_rejected_before_dispatch() {
        let backend = SimBackend::new(SimScript::default(), 0);
        let req = request("prompt", 0);
        assert!(matches!(
            backend.generate(&req).await,
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[tokio::test]
    async fn unscripted_generation_is_deterministic() {
        let req = request("unseen prompt", 2);
        let a = SimBackend::new(SimScript::default(), 7)
            .generate(&req)
            .await
            .unwrap();
        let b = SimBackend::new(SimScript::default(), 7)
            .generate(&req)
            .await
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let c = SimBackend::new(SimScript::default(), 8)
            .generate(&req)
            .await
            .unwrap();
        assert_ne!(a, c);
        // fallback completions parse under the default schema
        let schema = crate::trace::TraceSchema::perception_reasoning();
        assert!(crate::trace::parse_trace(&a[0], &schema).is_ok());
    }

    #[tokio::test]
    async fn fallback_matches_request_protocol() {
        let backend = SimBackend::new(SimScript::default(), 3);
        let problem = crate::problem::Problem {
            id: "f1".into(),
            source: "raven".into(),
            image_ref: None,
            question: "which?".into(),
            options: None,
            answer: "B".into(),
            answer_kind: crate::problem::AnswerKindTag::MultipleChoice,
            solutions: vec![],
            perception: None,
        };
        let schema = crate::trace::TraceSchema::perception_reasoning();
        let solution = "[Perception]\n<step_1>\na\n</step_1>\n[Reasoning]\n<step_1>\nb\n</step_1>\n<step_2>\nc\n</step_2>\n<correct_answer>\\boxed{B}</correct_answer>";
        let trace = crate::trace::parse_trace(solution, &schema).unwrap();

        // a judge request gets a parseable analysis/conclusion block
        let req = crate::prompts::judge_request(&problem, solution);
        let texts = backend.generate(&req).await.unwrap();
        let judged = crate::labeler::parse_judge_output(&texts[0], trace.total_steps());
        assert!(judged.is_ok(), "{:?}", texts[0]);

        // a next-step request gets a single step tag continuing the count
        let params = SamplingParams::default().with_n(1);
        let partial = "<step_1>\nfirst\n</step_1>";
        let req = crate::prompts::next_step_request(&problem, partial, &schema, params);
        let texts = backend.generate(&req).await.unwrap();
        assert!(texts[0].trim_start().starts_with("<step_2>"), "{:?}", texts[0]);
    }

    #[tokio::test]
    async fn scripted_logprobs_renormalize() {
        let mut script = SimScript::default();
        let req = ChatRequest::new("sys", "score").with_choice_tokens(&[PLUS_TOKEN, MINUS_TOKEN]);
        script.script_logprobs(&req, &[(PLUS_TOKEN, -0.1), (MINUS_TOKEN, -2.4)]);
        let backend = SimBackend::new(script, 0);
        let probs = backend.choice_probability(&req).await.unwrap();
        let oracle = (-0.1f64).exp() / ((-0.1f64).exp() + (-2.4f64).exp());
        assert!((probs.p_plus().unwrap() - oracle).abs() < 1e-12);
    }

    #[tokio::test]
    async fn scripted_p_plus_is_direct() {
        let mut script = SimScript::default();
        let req = ChatRequest::new("sys", "score").with_choice_tokens(&[PLUS_TOKEN, MINUS_TOKEN]);
        script.script_p_plus(&req, 1.0);
        let backend = SimBackend::new(script, 0);
        let probs = backend.choice_probability(&req).await.unwrap();
        assert_eq!(probs.p_plus().unwrap(), 1.0);
        assert_eq!(probs.probability_of(MINUS_TOKEN).unwrap(), 0.0);
    }

    #[tokio::test]
    async fn missing_candidate_is_reported() {
        let mut script = SimScript::default();
        let req = ChatRequest::new("sys", "score").with_choice_tokens(&[PLUS_TOKEN, MINUS_TOKEN]);
        script.script_logprobs(&req, &[(PLUS_TOKEN, -0.5)]);
        let backend = SimBackend::new(script, 0);
        assert!(matches!(
            backend.choice_probability(&req).await,
            Err(BackendError::CandidateMissing { .. })
        ));
    }

    #[tokio::test]
    async fn script_round_trips_through_file() {
        let mut script = SimScript::default();
        let req = request("p", 1);
        script.script_completions(&req, [("only", Some(false))]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        script.save(&path).unwrap();
        let loaded = SimScript::load(&path).unwrap();
        assert_eq!(loaded, script);
    }
}
