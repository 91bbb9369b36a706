//! File-based pipeline stages.
//!
//! Every output file starts with a metadata line carrying the config
//! fingerprint, seed, and tool version; the lines after it are the data
//! section and are byte-identical across reruns with the same inputs and
//! simulated backends. Long stages (rollout-label, tts) keep an append-only
//! journal of completed problem ids so interrupted runs resume without
//! duplicating work.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use futures::StreamExt;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::answers::NormalizedAnswer;
use crate::backends::{BackendError, BudgetSnapshot};
use crate::config::{BackendSet, ConfigError, RunConfig};
use crate::dataset::{
    balance, compute_stats, export_training_records, mutate_perception, render_stats_table,
    DatasetStats, DiscardRecord, MutationError, PerceptionPair,
};
use crate::eval::{
    classify_step, eval_accuracy, macro_f1_report, score_bench_sample, score_error_analysis,
    BenchStepSample, EvalReport, OutcomeRow, ScoreHistogram,
};
use crate::labeler::{
    attach_consensus_scores, build_labeled_sample, consensus_filter, judge_solution,
    label_by_threshold, mc_score, rollout_step, ConsensusBucket, JudgeParseError, LabeledSample,
    StepLabel, StepVerdict,
};
use crate::problem::{read_problems_file, Problem};
use crate::prompts;
use crate::trace::{Step, Trace};
use crate::tts::{
    bon_subsample, run_guided_greedy, run_majority, run_one_shot, run_step_aggregation,
    Accounting, BonCandidate, Strategy, TtsError, TtsOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl PipelineError {
    pub fn from_backend(e: BackendError) -> Self {
        if e.is_budget() {
            PipelineError::Budget(e.to_string())
        } else {
            PipelineError::Backend(e.to_string())
        }
    }

    /// Process exit code: 2 config, 3 budget, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Io(_) => 2,
            PipelineError::Budget(_) => 3,
            PipelineError::Backend(_) => 4,
        }
    }
}

/// Metadata embedded as the first line/row of every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_fingerprint: String,
    pub seed: u64,
    pub version: String,
}

impl RunMeta {
    pub fn for_config(config: &RunConfig) -> Self {
        Self {
            config_fingerprint: config.fingerprint(),
            seed: config.run.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: RunMeta,
}

/// JSONL writer that emits the metadata line first.
struct JsonlWriter {
    writer: BufWriter<File>,
}

impl JsonlWriter {
    fn create(path: &Path, meta: &RunMeta) -> Result<Self, PipelineError> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, &MetaLine { meta: meta.clone() })
            .map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
        Ok(Self { writer })
    }

    fn append(path: &Path) -> Result<Self, PipelineError> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    fn open(path: &Path, meta: &RunMeta, resume: bool) -> Result<Self, PipelineError> {
        if resume && path.exists() {
            let (existing, _lines) = read_jsonl_raw(path)?;
            match existing {
                Some(m) if m.config_fingerprint == meta.config_fingerprint => Self::append(path),
                Some(m) => Err(PipelineError::Config(format!(
                    "{}: resume with different config (was {}, now {})",
                    path.display(),
                    m.config_fingerprint,
                    meta.config_fingerprint
                ))),
                None => Err(PipelineError::Config(format!(
                    "{}: missing metadata line, cannot resume",
                    path.display()
                ))),
            }
        } else {
            Self::create(path, meta)
        }
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<(), PipelineError> {
        serde_json::to_writer(&mut self.writer, record).map_err(std::io::Error::other)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), PipelineError> {
        self.writer.flush()?;
        Ok(())
    }
}

fn read_jsonl_raw(path: &Path) -> Result<(Option<RunMeta>, Vec<String>), PipelineError> {
    let file = File::open(path)?;
    let mut meta = None;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(m) = serde_json::from_str::<MetaLine>(&line) {
                meta = Some(m.meta);
                continue;
            }
        }
        lines.push(line);
    }
    Ok((meta, lines))
}

/// Reads a JSONL file, tolerating (and returning) a leading metadata line.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Option<RunMeta>, Vec<T>), PipelineError> {
    let (meta, lines) = read_jsonl_raw(path)?;
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let record = serde_json::from_str(line).map_err(|e| {
            PipelineError::Config(format!("{} line {}: {e}", path.display(), i + 2))
        })?;
        records.push(record);
    }
    Ok((meta, records))
}

/// Splits a written file into its metadata line and the data section bytes,
/// for determinism checks.
pub fn split_data_section(path: &Path) -> Result<(String, Vec<u8>), PipelineError> {
    let bytes = std::fs::read(path)?;
    match bytes.iter().position(|&b| b == b'\n') {
        Some(newline) => Ok((
            String::from_utf8_lossy(&bytes[..newline]).into_owned(),
            bytes[newline + 1..].to_vec(),
        )),
        None => Ok((String::from_utf8_lossy(&bytes).into_owned(), Vec::new())),
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    let dir = config
        .io
        .out_dir
        .clone()
        .ok_or_else(|| PipelineError::Config("io.out_dir is not set".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, PipelineError> {
    path.as_deref()
        .ok_or_else(|| PipelineError::Config(format!("io.{what} is not set")))
}

fn load_problems(config: &RunConfig) -> Result<Vec<Problem>, PipelineError> {
    let path = required(&config.io.problems, "problems")?;
    let problems =
        read_problems_file(path).map_err(|e| PipelineError::Config(e.to_string()))?;
    for problem in &problems {
        problem
            .gold()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if config.schema_for_source(&problem.source).is_none() {
            return Err(PipelineError::Config(format!(
                "no schema for source {:?}",
                problem.source
            )));
        }
    }
    Ok(problems)
}

// ---------------------------------------------------------------------------
// journal

struct Journal {
    done: HashSet<String>,
    writer: BufWriter<File>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalLine {
    problem_id: String,
}

impl Journal {
    fn open(path: &Path, resume: bool) -> Result<Self, PipelineError> {
        let mut done = HashSet::new();
        if resume && path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if let Ok(entry) = serde_json::from_str::<JournalLine>(&line) {
                    done.insert(entry.problem_id);
                }
            }
        }
        let file = if resume && path.exists() {
            OpenOptions::new().append(true).open(path)?
        } else {
            File::create(path)?
        };
        Ok(Self {
            done,
            writer: BufWriter::new(file),
        })
    }

    fn mark(&mut self, problem_id: &str) -> Result<(), PipelineError> {
        serde_json::to_writer(
            &mut self.writer,
            &JournalLine {
                problem_id: problem_id.to_string(),
            },
        )
        .map_err(std::io::Error::other)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.done.insert(problem_id.to_string());
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// wire records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBody {
    pub steps: Vec<Step>,
    pub final_answer_text: String,
}

/// Labeled-sample line: `{problem_id, source, solution_index, trace,
/// verdicts, sample_label, error_phase?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSampleRecord {
    pub problem_id: String,
    pub source: String,
    pub solution_index: usize,
    pub trace: TraceBody,
    pub verdicts: Vec<StepVerdict>,
    pub sample_label: crate::labeler::SampleLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_phase: Option<crate::trace::Phase>,
}

impl LabeledSampleRecord {
    pub fn from_sample(sample: &LabeledSample, solution_index: usize) -> Self {
        Self {
            problem_id: sample.problem_id.clone(),
            source: sample.source.clone(),
            solution_index,
            trace: TraceBody {
                steps: sample.trace.steps().cloned().collect(),
                final_answer_text: sample.trace.final_answer_text.clone(),
            },
            verdicts: sample.verdicts.clone(),
            sample_label: sample.sample_label,
            error_phase: sample.error_phase,
        }
    }

    pub fn to_sample(&self) -> Result<LabeledSample, PipelineError> {
        let perception = self
            .trace
            .steps
            .iter()
            .filter(|s| s.phase == crate::trace::Phase::Perception)
            .cloned()
            .collect();
        let reasoning = self
            .trace
            .steps
            .iter()
            .filter(|s| s.phase == crate::trace::Phase::Reasoning)
            .cloned()
            .collect();
        let trace = Trace::new(perception, reasoning, self.trace.final_answer_text.clone())
            .map_err(PipelineError::Config)?;
        Ok(LabeledSample {
            problem_id: self.problem_id.clone(),
            source: self.source.clone(),
            trace,
            verdicts: self.verdicts.clone(),
            sample_label: self.sample_label,
            error_phase: self.error_phase,
        })
    }
}

/// Quarantined sample line: parse failures with stage and reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub problem_id: String,
    pub source: String,
    pub stage: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_index: Option<usize>,
}

/// One candidate in an outcome line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub aggregate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub correct: bool,
}

/// Outcome line: `{problem_id, strategy, n, selected_index, selected_answer,
/// correct, candidates, accounting}` plus an inline error field when the
/// problem failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub problem_id: String,
    pub source: String,
    pub strategy: Strategy,
    pub n: u32,
    pub selected_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_answer: Option<NormalizedAnswer>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    pub candidates: Vec<CandidateRecord>,
    pub accounting: Accounting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl OutcomeRecord {
    fn from_outcome(problem: &Problem, outcome: &TtsOutcome) -> Self {
        let gold = problem.gold().ok();
        let grade = |answer: Option<&NormalizedAnswer>| -> bool {
            match (answer, &gold) {
                (Some(a), Some(g)) => crate::answers::is_correct(a, g).unwrap_or(false),
                _ => false,
            }
        };
        let candidates = outcome
            .candidates
            .iter()
            .map(|c| CandidateRecord {
                aggregate: c.aggregate,
                step_scores: c.step_scores.iter().map(|s| s.p_plus).collect(),
                answer: c.answer.as_ref().ok().map(|a| a.value.clone()),
                correct: grade(c.answer.as_ref().ok()),
            })
            .collect();
        Self {
            problem_id: problem.id.clone(),
            source: problem.source.clone(),
            strategy: outcome.strategy,
            n: outcome.n,
            selected_index: outcome.selected_index,
            selected_answer: outcome.selected_answer.clone(),
            correct: grade(outcome.selected_answer.as_ref()),
            degraded: outcome.degraded,
            candidates,
            accounting: outcome.accounting,
            error: None,
        }
    }

    fn failed(problem: &Problem, strategy: Strategy, n: u32, error: String) -> Self {
        Self {
            problem_id: problem.id.clone(),
            source: problem.source.clone(),
            strategy,
            n,
            selected_index: 0,
            selected_answer: None,
            correct: false,
            degraded: true,
            candidates: Vec::new(),
            accounting: Accounting::default(),
            error: Some(error),
        }
    }
}

// ---------------------------------------------------------------------------
// rollout-label

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLabelSummary {
    pub problems: usize,
    pub labeled: usize,
    pub discarded: usize,
    pub quarantined: usize,
    pub stats: DatasetStats,
    pub budget: BudgetSnapshot,
}

enum LabelEvent {
    Labeled(Box<LabeledSample>, usize),
    Discard(DiscardRecord),
    Quarantine(QuarantineRecord),
}

async fn label_problem(
    problem: &Problem,
    config: &RunConfig,
    backends: &BackendSet,
) -> Result<Vec<LabelEvent>, BackendError> {
    let schema = config
        .schema_for_source(&problem.source)
        .expect("validated at load");
    let solutions: Vec<String> = if problem.solutions.is_empty() {
        let params = config.sampling_for(
            &config.backends.policy,
            config.run.solutions_per_problem,
            Strategy::OneShot,
        );
        backends
            .policy
            .generate(&prompts::solution_request(problem, &schema, params))
            .await?
    } else {
        problem.solutions.clone()
    };

    let mut events = Vec::new();
    for (solution_index, text) in solutions.iter().enumerate() {
        let trace = match crate::trace::parse_trace(text, &schema) {
            Ok(trace) => trace,
            Err(e) => {
                events.push(LabelEvent::Quarantine(QuarantineRecord {
                    problem_id: problem.id.clone(),
                    source: problem.source.clone(),
                    stage: "trace-parse".into(),
                    reason: e.to_string(),
                    solution_index: Some(solution_index),
                }));
                continue;
            }
        };

        // MC rollouts for every step prefix, concurrent under the backend cap
        let rollout_params = config.sampling_for(
            &config.backends.policy,
            config.run.rollout_n,
            Strategy::OneShot,
        );
        let batches = futures::future::join_all((1..=trace.total_steps()).map(|k| {
            let params = rollout_params.clone();
            let trace = &trace;
            let schema = &schema;
            async move {
                rollout_step(problem, trace, k, schema, params, backends.policy.as_ref()).await
            }
        }))
        .await
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let scores: Vec<f64> = batches.iter().map(mc_score).collect();
        let mc_labels: Vec<StepLabel> = scores
            .iter()
            .map(|&s| label_by_threshold(s, config.run.mc_threshold))
            .collect();

        let judge = match judge_solution(problem, &trace, &schema, backends.judge.as_ref()).await
        {
            Ok(judge) => judge,
            Err(JudgeParseError::Backend(e)) => return Err(e),
            Err(e) => {
                events.push(LabelEvent::Quarantine(QuarantineRecord {
                    problem_id: problem.id.clone(),
                    source: problem.source.clone(),
                    stage: "judge-parse".into(),
                    reason: e.to_string(),
                    solution_index: Some(solution_index),
                }));
                continue;
            }
        };

        match consensus_filter(&judge, &mc_labels) {
            Ok(ConsensusBucket::IncorrectIdentified) => {
                events.push(LabelEvent::Labeled(
                    Box::new(build_labeled_sample(
                        &problem.id,
                        &problem.source,
                        &trace,
                        &judge,
                    )),
                    solution_index,
                ));
            }
            Ok(ConsensusBucket::ConsensusCorrect) => {
                let mut sample =
                    build_labeled_sample(&problem.id, &problem.source, &trace, &judge);
                attach_consensus_scores(&mut sample, &scores);
                events.push(LabelEvent::Labeled(Box::new(sample), solution_index));
            }
            Ok(ConsensusBucket::Discard) => {
                let first_flagged = mc_labels
                    .iter()
                    .position(|l| *l == StepLabel::Incorrect)
                    .map(|i| i + 1)
                    .unwrap_or(0);
                events.push(LabelEvent::Discard(DiscardRecord {
                    problem_id: problem.id.clone(),
                    source: problem.source.clone(),
                    reason: format!(
                        "judge correct but MC labels step {first_flagged} incorrect"
                    ),
                }));
            }
            Err(e) => {
                events.push(LabelEvent::Quarantine(QuarantineRecord {
                    problem_id: problem.id.clone(),
                    source: problem.source.clone(),
                    stage: "consensus".into(),
                    reason: e.to_string(),
                    solution_index: Some(solution_index),
                }));
            }
        }
    }
    Ok(events)
}

/// Dataset-construction stage: generation (when solutions are absent),
/// parsing, MC rollouts, judging, consensus filtering, and truncation.
/// Writes `labeled.jsonl`, `discards.jsonl`, `quarantine.jsonl`,
/// `stats.json`, and `stats.txt`; checkpointed per problem id.
pub async fn run_rollout_label(
    config: &RunConfig,
    backends: &BackendSet,
    resume: bool,
) -> Result<RolloutLabelSummary, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let problems = load_problems(config)?;

    let mut journal = Journal::open(&dir.join("journal_rollout.jsonl"), resume)?;
    let mut labeled_out = JsonlWriter::open(&dir.join("labeled.jsonl"), &meta, resume)?;
    let mut discards_out = JsonlWriter::open(&dir.join("discards.jsonl"), &meta, resume)?;
    let mut quarantine_out = JsonlWriter::open(&dir.join("quarantine.jsonl"), &meta, resume)?;

    let pending: Vec<&Problem> = problems
        .iter()
        .filter(|p| !journal.done.contains(&p.id))
        .collect();

    let mut labeled = 0usize;
    let mut discarded = 0usize;
    let mut quarantined = 0usize;
    let mut stop: Option<PipelineError> = None;

    let mut stream = futures::stream::iter(pending.into_iter().map(|problem| async move {
        (problem, label_problem(problem, config, backends).await)
    }))
    .buffered(config.run.concurrency);

    while let Some((problem, result)) = stream.next().await {
        match result {
            Ok(events) => {
                for event in events {
                    match event {
                        LabelEvent::Labeled(sample, solution_index) => {
                            labeled_out
                                .write(&LabeledSampleRecord::from_sample(&sample, solution_index))?;
                            labeled += 1;
                        }
                        LabelEvent::Discard(record) => {
                            discards_out.write(&record)?;
                            discarded += 1;
                        }
                        LabelEvent::Quarantine(record) => {
                            quarantine_out.write(&record)?;
                            quarantined += 1;
                        }
                    }
                }
                labeled_out.flush()?;
                discards_out.flush()?;
                quarantine_out.flush()?;
                journal.mark(&problem.id)?;
            }
            Err(e) => {
                stop = Some(PipelineError::from_backend(e));
                break;
            }
        }
    }
    drop(stream);
    labeled_out.flush()?;
    discards_out.flush()?;
    quarantine_out.flush()?;

    if let Some(error) = stop {
        return Err(error);
    }

    let stats = write_stats_files(config, &dir, &dir.join("labeled.jsonl"))?;
    Ok(RolloutLabelSummary {
        problems: problems.len(),
        labeled,
        discarded,
        quarantined,
        stats,
        budget: backends.budget.snapshot(),
    })
}

fn read_labeled(path: &Path) -> Result<Vec<LabeledSample>, PipelineError> {
    let (_, records): (_, Vec<LabeledSampleRecord>) = read_jsonl(path)?;
    records.iter().map(|r| r.to_sample()).collect()
}

fn labeled_path(config: &RunConfig, dir: &Path) -> PathBuf {
    config
        .io
        .labeled
        .clone()
        .unwrap_or_else(|| dir.join("labeled.jsonl"))
}

fn write_stats_files(
    config: &RunConfig,
    dir: &Path,
    labeled: &Path,
) -> Result<DatasetStats, PipelineError> {
    let meta = RunMeta::for_config(config);
    let samples = read_labeled(labeled)?;
    let discards_file = dir.join("discards.jsonl");
    let discards: Vec<DiscardRecord> = if discards_file.exists() {
        read_jsonl(&discards_file)?.1
    } else {
        Vec::new()
    };
    let stats = compute_stats(&samples, &discards);
    let report = serde_json::json!({ "meta": meta, "stats": stats });
    std::fs::write(
        dir.join("stats.json"),
        serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?,
    )?;
    let mut table = format!(
        "# fingerprint={} seed={} version={}\n",
        meta.config_fingerprint, meta.seed, meta.version
    );
    table.push_str(&render_stats_table(&stats));
    std::fs::write(dir.join("stats.txt"), table)?;
    Ok(stats)
}

/// Statistics stage over an existing labeled file.
pub fn run_stats(config: &RunConfig) -> Result<DatasetStats, PipelineError> {
    let dir = out_dir(config)?;
    let labeled = labeled_path(config, &dir);
    write_stats_files(config, &dir, &labeled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub input_samples: usize,
    pub output_samples: usize,
    pub majority_source: String,
    pub all_correct: usize,
    pub has_incorrect: usize,
}

/// Balanced-variant stage: equalizes all-correct and has-incorrect counts by
/// downsampling the majority source's incorrect samples.
pub fn run_balance(config: &RunConfig) -> Result<BalanceSummary, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let path = labeled_path(config, &dir);
    let (_, records): (_, Vec<LabeledSampleRecord>) = read_jsonl(&path)?;
    let samples: Vec<LabeledSample> = records
        .iter()
        .map(|r| r.to_sample())
        .collect::<Result<_, _>>()?;

    let majority_source = match &config.balance.majority_source {
        Some(source) => source.clone(),
        None => {
            // default: the source with the most incorrect samples
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for sample in &samples {
                if sample.sample_label == crate::labeler::SampleLabel::HasIncorrect {
                    *counts.entry(sample.source.as_str()).or_default() += 1;
                }
            }
            counts
                .iter()
                .max_by_key(|(_, c)| **c)
                .map(|(s, _)| s.to_string())
                .ok_or_else(|| {
                    PipelineError::Config("no incorrect samples; nothing to balance".into())
                })?
        }
    };

    let balanced = balance(&samples, &majority_source, config.run.seed)
        .map_err(|e| PipelineError::Config(e.to_string()))?;

    // records and samples are index-aligned and balance preserves input
    // order; walk both to keep solution_index intact in the output rows
    let mut kept_records: Vec<&LabeledSampleRecord> = Vec::with_capacity(balanced.len());
    let mut cursor = 0usize;
    for (record, sample) in records.iter().zip(&samples) {
        if cursor < balanced.len() && *sample == balanced[cursor] {
            kept_records.push(record);
            cursor += 1;
        }
    }

    let mut writer = JsonlWriter::create(&dir.join("balanced.jsonl"), &meta)?;
    for record in &kept_records {
        writer.write(record)?;
    }
    writer.flush()?;

    let all_correct = balanced
        .iter()
        .filter(|s| s.sample_label == crate::labeler::SampleLabel::AllCorrect)
        .count();
    Ok(BalanceSummary {
        input_samples: samples.len(),
        output_samples: balanced.len(),
        majority_source,
        all_correct,
        has_incorrect: balanced.len() - all_correct,
    })
}

/// Training-record export stage. Reads the balanced file when present,
/// otherwise the labeled file.
pub fn run_export(config: &RunConfig) -> Result<usize, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let balanced = dir.join("balanced.jsonl");
    let input = if config.io.labeled.is_some() {
        labeled_path(config, &dir)
    } else if balanced.exists() {
        balanced
    } else {
        dir.join("labeled.jsonl")
    };
    let samples = read_labeled(&input)?;
    let problems: BTreeMap<String, Problem> = match &config.io.problems {
        Some(path) => read_problems_file(path)
            .map_err(|e| PipelineError::Config(e.to_string()))?
            .into_iter()
            .map(|p| (p.id.clone(), p))
            .collect(),
        None => BTreeMap::new(),
    };
    let records = export_training_records(
        &samples,
        &problems,
        prompts::PRM_PROMPT_ID,
        config.run.mask_perception,
    );
    let mut writer = JsonlWriter::create(&dir.join("training.jsonl"), &meta)?;
    for record in &records {
        writer.write(record)?;
    }
    writer.flush()?;
    Ok(records.len())
}

// ---------------------------------------------------------------------------
// tts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsSummary {
    pub problems: usize,
    pub errored: usize,
    pub accuracy: EvalReport,
    pub budget: BudgetSnapshot,
}

async fn tts_problem(
    problem: &Problem,
    config: &RunConfig,
    backends: &BackendSet,
) -> Result<TtsOutcome, TtsError> {
    let schema = config
        .schema_for_source(&problem.source)
        .expect("validated at load");
    let strategy = config.run.strategy;
    let params = config.sampling_for(&config.backends.policy, config.run.n, strategy);
    match strategy {
        Strategy::OneShot => {
            run_one_shot(
                problem,
                backends.policy.as_ref(),
                backends.prm.as_ref(),
                &schema,
                params,
            )
            .await
        }
        Strategy::StepAgg => {
            run_step_aggregation(
                problem,
                backends.policy.as_ref(),
                backends.prm.as_ref(),
                &schema,
                params,
            )
            .await
        }
        Strategy::Greedy => {
            run_guided_greedy(
                problem,
                backends.policy.as_ref(),
                backends.prm.as_ref(),
                &schema,
                params,
                config.run.max_steps,
            )
            .await
        }
        Strategy::Majority => {
            run_majority(problem, backends.policy.as_ref(), &schema, params).await
        }
    }
}

/// Test-time-scaling stage: one outcome line per problem plus an accuracy
/// report. Per-problem failures are recorded inline and the run continues;
/// budget exhaustion stops the run cleanly.
pub async fn run_tts_stage(
    config: &RunConfig,
    backends: &BackendSet,
    resume: bool,
) -> Result<TtsSummary, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let problems = load_problems(config)?;

    let mut journal = Journal::open(&dir.join("journal_tts.jsonl"), resume)?;
    let mut outcomes_out = JsonlWriter::open(&dir.join("outcomes.jsonl"), &meta, resume)?;

    let pending: Vec<&Problem> = problems
        .iter()
        .filter(|p| !journal.done.contains(&p.id))
        .collect();

    let mut errored = 0usize;
    let mut stop: Option<PipelineError> = None;
    let mut stream = futures::stream::iter(pending.into_iter().map(|problem| async move {
        (problem, tts_problem(problem, config, backends).await)
    }))
    .buffered(config.run.concurrency);

    while let Some((problem, result)) = stream.next().await {
        let record = match result {
            Ok(outcome) => OutcomeRecord::from_outcome(problem, &outcome),
            Err(TtsError::Backend(e)) if e.is_budget() => {
                stop = Some(PipelineError::Budget(e.to_string()));
                break;
            }
            Err(e) => {
                errored += 1;
                OutcomeRecord::failed(problem, config.run.strategy, config.run.n, e.to_string())
            }
        };
        outcomes_out.write(&record)?;
        outcomes_out.flush()?;
        journal.mark(&problem.id)?;
    }
    drop(stream);
    outcomes_out.flush()?;

    if let Some(error) = stop {
        return Err(error);
    }

    let accuracy = write_accuracy_report(config, &dir, &problems)?;
    Ok(TtsSummary {
        problems: problems.len(),
        errored,
        accuracy,
        budget: backends.budget.snapshot(),
    })
}

fn outcomes_path(config: &RunConfig, dir: &Path) -> PathBuf {
    config
        .io
        .outcomes
        .clone()
        .unwrap_or_else(|| dir.join("outcomes.jsonl"))
}

fn outcome_rows(records: &[OutcomeRecord]) -> Vec<OutcomeRow> {
    records
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| OutcomeRow {
            problem_id: r.problem_id.clone(),
            source: r.source.clone(),
            strategy: r.strategy,
            selected_answer: r.selected_answer.clone(),
            aggregate: r
                .candidates
                .get(r.selected_index)
                .map(|c| c.aggregate)
                .unwrap_or(0.0),
            correct: r.correct,
        })
        .collect()
}

fn write_accuracy_report(
    config: &RunConfig,
    dir: &Path,
    problems: &[Problem],
) -> Result<EvalReport, PipelineError> {
    let meta = RunMeta::for_config(config);
    let (_, records): (_, Vec<OutcomeRecord>) = read_jsonl(&outcomes_path(config, dir))?;
    let gold: BTreeMap<String, NormalizedAnswer> = problems
        .iter()
        .map(|p| (p.id.clone(), p.gold().expect("validated at load")))
        .collect();
    let rows = outcome_rows(&records);
    let report =
        eval_accuracy(&rows, &gold).map_err(|e| PipelineError::Config(e.to_string()))?;
    let payload = serde_json::json!({ "meta": meta, "report": report });
    std::fs::write(
        dir.join("accuracy.json"),
        serde_json::to_string_pretty(&payload).map_err(std::io::Error::other)?,
    )?;
    let mut table = format!(
        "# fingerprint={} seed={} version={}\n",
        meta.config_fingerprint, meta.seed, meta.version
    );
    table.push_str(&format!("overall          {:>8.4}\n", report.overall));
    for (source, value) in &report.per_source {
        table.push_str(&format!("  {source:<14} {value:>8.4}\n"));
    }
    std::fs::write(dir.join("accuracy.txt"), table)?;
    Ok(report)
}

/// Accuracy report over an existing outcomes file.
pub fn run_eval_accuracy(config: &RunConfig) -> Result<EvalReport, PipelineError> {
    let dir = out_dir(config)?;
    let problems = load_problems(config)?;
    write_accuracy_report(config, &dir, &problems)
}

// ---------------------------------------------------------------------------
// step-level evaluation

/// Scores a step-annotated benchmark file with the PRM and reports macro-F1
/// per source column (pooled) plus the source-averaged overall.
pub async fn run_eval_steps(
    config: &RunConfig,
    backends: &BackendSet,
) -> Result<EvalReport, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let bench_path = required(&config.io.bench, "bench")?;
    let (_, samples): (_, Vec<BenchStepSample>) = read_jsonl(bench_path)?;
    for sample in &samples {
        sample
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }

    let scored = futures::stream::iter(samples.iter().map(|sample| async move {
        score_bench_sample(sample, backends.prm.as_ref())
            .await
            .map(|scores| (sample, scores))
    }))
    .buffered(config.run.concurrency)
    .collect::<Vec<_>>()
    .await;

    let mut rows = Vec::new();
    for result in scored {
        let (sample, scores) = result.map_err(PipelineError::from_backend)?;
        let predictions: Vec<StepLabel> = scores.iter().map(|&p| classify_step(p)).collect();
        rows.push((
            sample.problem.source.clone(),
            predictions,
            sample.gold_labels.clone(),
        ));
    }
    let report = macro_f1_report(&rows).map_err(|e| PipelineError::Config(e.to_string()))?;
    let payload = serde_json::json!({ "meta": meta, "report": report });
    std::fs::write(
        dir.join("step_eval.json"),
        serde_json::to_string_pretty(&payload).map_err(std::io::Error::other)?,
    )?;
    let mut table = format!(
        "# fingerprint={} seed={} version={}\n",
        meta.config_fingerprint, meta.seed, meta.version
    );
    table.push_str(&format!("macro-F1 (pooled)    {:>8.4}\n", report.overall));
    if let Some(avg) = report.overall_source_averaged {
        table.push_str(&format!("macro-F1 (averaged)  {avg:>8.4}\n"));
    }
    for (source, value) in &report.per_source {
        table.push_str(&format!("  {source:<16} {value:>8.4}\n"));
    }
    std::fs::write(dir.join("step_eval.txt"), table)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// analyses

/// Score-distribution error analysis over an outcomes file: one histogram per
/// strategy, as JSON and CSV.
pub fn run_analyze_scores(
    config: &RunConfig,
) -> Result<BTreeMap<Strategy, ScoreHistogram>, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let (_, records): (_, Vec<OutcomeRecord>) = read_jsonl(&outcomes_path(config, dir.as_path()))?;
    let histograms = score_error_analysis(&outcome_rows(&records));
    let payload = serde_json::json!({ "meta": meta, "histograms": histograms });
    std::fs::write(
        dir.join("score_histograms.json"),
        serde_json::to_string_pretty(&payload).map_err(std::io::Error::other)?,
    )?;
    for (strategy, histogram) in &histograms {
        let mut csv = format!(
            "# fingerprint={} seed={} version={}\n",
            meta.config_fingerprint, meta.seed, meta.version
        );
        csv.push_str(&histogram.to_csv());
        std::fs::write(dir.join(format!("score_histogram_{strategy}.csv")), csv)?;
    }
    Ok(histograms)
}

/// One BoN@k curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonCurveRow {
    pub strategy: Strategy,
    pub k: usize,
    pub accuracy: f64,
    pub problems: usize,
}

/// BoN@k curve over an outcomes file: for each strategy present (greedy
/// excluded; its pool has a single path) and each configured k, the mean
/// subsampled accuracy across problems.
pub fn run_bon_curve(config: &RunConfig) -> Result<Vec<BonCurveRow>, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let (_, records): (_, Vec<OutcomeRecord>) = read_jsonl(&outcomes_path(config, dir.as_path()))?;

    let mut by_strategy: BTreeMap<Strategy, Vec<&OutcomeRecord>> = BTreeMap::new();
    for record in &records {
        if record.error.is_none() && record.strategy != Strategy::Greedy {
            by_strategy.entry(record.strategy).or_default().push(record);
        }
    }

    let mut rows = Vec::new();
    for (&strategy, outcomes) in &by_strategy {
        for &k in &config.bon.ks {
            let mut total = 0.0f64;
            let mut counted = 0usize;
            for outcome in outcomes {
                if k > outcome.candidates.len() {
                    continue;
                }
                let pool: Vec<BonCandidate> = outcome
                    .candidates
                    .iter()
                    .map(|c| BonCandidate {
                        one_shot_score: c.aggregate,
                        step_scores: c.step_scores.clone(),
                        answer: c.answer.clone(),
                        is_correct: c.correct,
                    })
                    .collect();
                let accuracy = bon_subsample(&pool, k, config.run.seed, config.bon.trials)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                total += match strategy {
                    Strategy::OneShot => accuracy.one_shot,
                    Strategy::StepAgg => accuracy.step_agg,
                    Strategy::Majority => accuracy.majority,
                    Strategy::Greedy => unreachable!("greedy outcomes are filtered"),
                };
                counted += 1;
            }
            if counted > 0 {
                rows.push(BonCurveRow {
                    strategy,
                    k,
                    accuracy: total / counted as f64,
                    problems: counted,
                });
            }
        }
    }

    let mut csv = format!(
        "# fingerprint={} seed={} version={}\n",
        meta.config_fingerprint, meta.seed, meta.version
    );
    csv.push_str("strategy,k,accuracy,problems\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{}\n",
            row.strategy, row.k, row.accuracy, row.problems
        ));
    }
    std::fs::write(dir.join("bon_curve.csv"), csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// perception mutation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationSummary {
    pub pairs: usize,
    pub quarantined: usize,
}

/// Perception-mutation stage: one positive/negative pair per problem that
/// carries a ground-truth perception description.
pub async fn run_mutate_perception(
    config: &RunConfig,
    backends: &BackendSet,
) -> Result<MutationSummary, PipelineError> {
    let dir = out_dir(config)?;
    let meta = RunMeta::for_config(config);
    let problems = load_problems(config)?;

    let mut pairs_out = JsonlWriter::create(&dir.join("perception_pairs.jsonl"), &meta)?;
    let mut quarantine_out = JsonlWriter::create(&dir.join("mutation_quarantine.jsonl"), &meta)?;

    let mut pairs = 0usize;
    let mut quarantined = 0usize;
    let tasks = problems.iter().filter_map(|problem| {
        problem.perception.as_ref().map(|perception| {
            let perception = perception.clone();
            async move {
                let result =
                    mutate_perception(problem, &perception, backends.policy.as_ref()).await;
                (problem, result)
            }
        })
    });
    let mut stream = futures::stream::iter(tasks).buffered(config.run.concurrency);
    while let Some((problem, result)) = stream.next().await {
        match result {
            Ok(pair) => {
                pairs_out.write::<PerceptionPair>(&pair)?;
                pairs += 1;
            }
            Err(MutationError::GenerationInvalid(reason)) => {
                quarantine_out.write(&QuarantineRecord {
                    problem_id: problem.id.clone(),
                    source: problem.source.clone(),
                    stage: "perception-mutation".into(),
                    reason,
                    solution_index: None,
                })?;
                quarantined += 1;
            }
            Err(MutationError::Backend(e)) => {
                pairs_out.flush()?;
                quarantine_out.flush()?;
                return Err(PipelineError::from_backend(e));
            }
        }
    }
    drop(stream);
    pairs_out.flush()?;
    quarantine_out.flush()?;
    Ok(MutationSummary { pairs, quarantined })
}
