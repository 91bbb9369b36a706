//! Prompt construction for every model role: policy generation (full
//! solutions, rollout continuations, single next steps), judge verification,
//! PRM scoring, and perception rephrase/mutation.
//!
//! The structural markers in these prompts (section headers, `<step_k>` tags,
//! the answer tag, `<analysis_k>`/`<conclusion>` tags, the `"+"`/`"-"` reply
//! tokens) are load-bearing: parsers elsewhere in the crate expect exactly
//! these shapes.

use crate::backends::{ChatRequest, SamplingParams, MINUS_TOKEN, PLUS_TOKEN};
use crate::problem::Problem;
use crate::trace::TraceSchema;

/// Identifier stored alongside exported training records.
pub const PRM_PROMPT_ID: &str = "prm-cumulative-v1";

/// System prompt for the PRM role: one step per round, cumulative judgment,
/// single-token reply.
pub const PRM_SYSTEM_PROMPT: &str = "You are a step-level verifier for visual reasoning \
solutions. You receive a problem, then solution steps; each later round adds one new step. \
Judge the cumulative soundness of everything shown so far: described visual details must \
match the image, and every inference must follow from the image and the earlier steps. \
Reply with \"+\" when all steps so far hold up, or \"-\" once any step has gone wrong. \
An error in one step invalidates every step after it. Respond with \"+\" or \"-\" only, \
no other text.";

const POLICY_SYSTEM_PROMPT: &str = "You solve visual reasoning problems in two explicit \
stages. First inventory the relevant image content step by step, then reason step by step \
from those observations to the answer. Keep each step small and self-contained.";

const JUDGE_SYSTEM_PROMPT: &str = "You verify step-by-step solutions to visual reasoning \
problems, checking perception claims against the image and reasoning steps for logical \
validity.";

fn question_block(problem: &Problem) -> String {
    let mut block = format!("Question: {}", problem.question);
    let options = problem.options_text();
    if !options.is_empty() {
        block.push_str("\nOptions: ");
        block.push_str(&options);
    }
    block
}

fn format_instructions(schema: &TraceSchema) -> String {
    format!(
        "Write the solution in exactly this format:\n\n{p}\n{so1}\n(first perception step)\n{sc1}\n{so2}\n(next perception step, and so on)\n{sc2}\n{r}\n{so1}\n(first reasoning step)\n{sc1}\n{so2}\n(next reasoning step, and so on)\n{sc2}\n{ao}\n\\boxed{{final answer}}\n{ac}\n\nNumber the step tags consecutively from 1 inside each section. Put the final answer \
inside one \\boxed{{}}; when options are listed, the box must contain a single option letter.",
        p = schema.perception_headers[0],
        r = schema.reasoning_headers[0],
        so1 = schema.step_open_tag(1),
        sc1 = schema.step_close_tag(1),
        so2 = schema.step_open_tag(2),
        sc2 = schema.step_close_tag(2),
        ao = schema.answer_open,
        ac = schema.answer_close,
    )
}

/// Full structured solution from scratch.
pub fn solution_request(
    problem: &Problem,
    schema: &TraceSchema,
    sampling: SamplingParams,
) -> ChatRequest {
    let user = format!(
        "{}\n\n{}",
        question_block(problem),
        format_instructions(schema)
    );
    ChatRequest::new(POLICY_SYSTEM_PROMPT, user)
        .with_image(problem.image_ref.clone().map(image_payload))
        .with_sampling(sampling)
}

/// Completion of a solution from a rendered step prefix.
pub fn rollout_request(
    problem: &Problem,
    prefix_text: &str,
    schema: &TraceSchema,
    sampling: SamplingParams,
) -> ChatRequest {
    let mut user = format!(
        "{}\n\n{}",
        question_block(problem),
        format_instructions(schema)
    );
    if prefix_text.is_empty() {
        user.push_str("\n\nWrite the complete solution.");
    } else {
        user.push_str(&format!(
            "\n\nThe solution so far:\n{prefix_text}\nContinue from the next step, keep the \
same format, and finish with the answer tag."
        ));
    }
    ChatRequest::new(POLICY_SYSTEM_PROMPT, user)
        .with_image(problem.image_ref.clone().map(image_payload))
        .with_sampling(sampling)
}

/// Exactly one more step (or the answer tag when done), for guided greedy
/// decoding.
pub fn next_step_request(
    problem: &Problem,
    partial_text: &str,
    schema: &TraceSchema,
    sampling: SamplingParams,
) -> ChatRequest {
    let mut user = format!(
        "{}\n\n{}",
        question_block(problem),
        format_instructions(schema)
    );
    if partial_text.is_empty() {
        user.push_str(
            "\n\nProduce only the first step of the solution (one step tag), then stop.",
        );
    } else {
        user.push_str(&format!(
            "\n\nThe solution so far:\n{partial_text}\nProduce only the next step (one step \
tag), then stop. If the solution is complete, emit the answer tag instead."
        ));
    }
    ChatRequest::new(POLICY_SYSTEM_PROMPT, user)
        .with_image(problem.image_ref.clone().map(image_payload))
        .with_sampling(sampling)
}

/// Step-by-step verification with early termination at the first material
/// error.
pub fn judge_request(problem: &Problem, solution_text: &str) -> ChatRequest {
    let user = format!(
        "Review each step of the solution below in order. For step k, check that described \
visual content is actually present and that the step follows logically from the image and \
the steps before it, then record your check as:\n<analysis_k>\n(analysis of step k)\n\
</analysis_k>\nAnalyze the perception steps first, then the reasoning steps, numbering the \
analyses 1, 2, ... within each section. When a step contains a material error, explain the \
error in that step's analysis, skip all later steps, and conclude immediately. After the \
analyses, emit:\n<conclusion>\nCorrect\n</conclusion>\nor\n<conclusion>\nIncorrect\n\
</conclusion>\nThe conclusion tag must contain exactly Correct or Incorrect, with no other \
text or punctuation.\n\n[Problem]\n{}\n\n[Solution]\n{}",
        question_block(problem),
        solution_text,
    );
    ChatRequest::new(JUDGE_SYSTEM_PROMPT, user)
        .with_image(problem.image_ref.clone().map(image_payload))
        .with_sampling(SamplingParams {
            n: 1,
            temperature: 0.0,
            top_p: 1.0,
            top_k: 1,
            max_new_tokens: 8192,
            repetition_penalty: 1.0,
            seed: None,
        })
}

/// PRM score of a full candidate solution in a single round.
pub fn prm_one_shot_request(problem: &Problem, solution_text: &str) -> ChatRequest {
    let user = format!(
        "{}\n\nCandidate solution (complete):\n{}",
        question_block(problem),
        solution_text,
    );
    prm_request(problem, user)
}

/// PRM score of the solution prefix through step `shown`; the multi-round
/// protocol collapsed into one message per scored step.
pub fn prm_step_request(problem: &Problem, steps_text: &str, shown: usize) -> ChatRequest {
    let user = format!(
        "{}\n\nSteps 1..{} of the candidate solution:\n{}",
        question_block(problem),
        shown,
        steps_text,
    );
    prm_request(problem, user)
}

fn prm_request(problem: &Problem, user: String) -> ChatRequest {
    ChatRequest::new(PRM_SYSTEM_PROMPT, user)
        .with_image(problem.image_ref.clone().map(image_payload))
        .with_sampling(SamplingParams {
            n: 1,
            temperature: 0.0,
            top_p: 1.0,
            top_k: 1,
            max_new_tokens: 1,
            repetition_penalty: 1.0,
            seed: None,
        })
        .with_choice_tokens(&[PLUS_TOKEN, MINUS_TOKEN])
}

/// Natural rewording of a ground-truth perception description, content
/// preserved.
pub fn rephrase_request(problem: &Problem, perception_text: &str) -> ChatRequest {
    let user = format!(
        "Rewrite the image description below so it reads naturally and fluently. Keep every \
stated detail; do not add, drop, or alter any fact. Reply with the rewritten description \
only.\n\nQuestion: {}\nDescription: {}",
        problem.question, perception_text,
    );
    mutation_chat(problem, user)
}

/// Single-detail corruption of a perception description.
pub fn mutate_request(problem: &Problem, perception_text: &str) -> ChatRequest {
    let user = format!(
        "Introduce exactly one small, plausible factual error into the image description \
below: change a single detail that matters for the question, such as an object identity, a \
color, a count, a size, or a position. Keep the text fluent and realistic; alter nothing \
else. Reply with the altered description only.\n\nQuestion: {}\nDescription: {}",
        problem.question, perception_text,
    );
    mutation_chat(problem, user)
}

fn mutation_chat(problem: &Problem, user: String) -> ChatRequest {
    ChatRequest::new(
        "You prepare training data for vision-language models by editing image descriptions.",
        user,
    )
    .with_image(problem.image_ref.clone().map(image_payload))
    .with_sampling(SamplingParams {
        n: 1,
        temperature: 1.0,
        top_p: 1.0,
        top_k: 50,
        max_new_tokens: 1024,
        repetition_penalty: 1.0,
        seed: None,
    })
}

fn image_payload(reference: String) -> crate::backends::ImagePayload {
    use crate::backends::ImagePayload;
    if reference.starts_with("http://") || reference.starts_with("https://") {
        ImagePayload::Url { url: reference }
    } else if let Some(rest) = reference.strip_prefix("data:") {
        match rest.split_once(";base64,") {
            Some((media_type, data)) => ImagePayload::Base64 {
                media_type: media_type.to_string(),
                data: data.to_string(),
            },
            None => ImagePayload::Url { url: reference },
        }
    } else {
        ImagePayload::Path { path: reference }
    }
}
