//! Toolkit for building step-level process-supervision datasets from model
//! rollouts and for running PRM-guided test-time scaling.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`trace`]: parse/render the structured perception–reasoning solution format
//! - [`answers`]: final-answer extraction, normalization, and majority voting
//! - [`backends`]: chat backends (OpenAI-compatible HTTP and a deterministic simulator)
//! - [`labeler`]: MC-score rollouts, judge adjudication, consensus filtering, truncation
//! - [`dataset`]: statistics, balanced-set construction, training-record export,
//!   perception mutation pairs
//! - [`tts`]: test-time scaling strategies (guided greedy, one-shot, step
//!   aggregation, majority voting) and BoN@k subsampling
//! - [`eval`]: accuracy, step-level macro-F1, score-error histograms
//! - [`pipeline`]: file-based stage runners with checkpoint/resume, used by the CLI

pub mod answers;
pub mod backends;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod labeler;
pub mod pipeline;
pub mod problem;
pub mod prompts;
pub mod seeds;
pub mod trace;
pub mod tts;
