//! Prompt templates for generation, refinement and evaluation.
//!
//! Every prompt is the instruction sentence on its first line followed by a
//! labeled input block:
//!
//! ```text
//! As an explanation generation expert, can you generate an explanation for the given input?
//! Question: <stem>
//! Correct Answer: <answer>
//! Distractor 1: <first distractor>
//! ...
//! ```
//!
//! Refinement prompts append one feedback line per earlier turn and end with
//! [`CLOSING_REQUEST`]. Scores are always rendered with two decimals.

use std::fmt::Write as _;

use thiserror::Error;

use crate::types::{HistoryMode, Mcq};

pub const GENERATION_INSTRUCTION: &str =
    "As an explanation generation expert, can you generate an explanation for the given input?";
pub const EVALUATION_INSTRUCTION: &str =
    "As an explanation evaluation expert, can you generate the quality rating score for the given input?";
/// Opening words of every feedback line in a refinement prompt.
pub const FEEDBACK_LEAD: &str = "Your previous evaluation score and generation explanation was";
pub const CLOSING_REQUEST: &str = "Please generate a better explanation.";

pub const QUESTION_LABEL: &str = "Question: ";
pub const ANSWER_LABEL: &str = "Correct Answer: ";
pub const EXPLANATION_LABEL: &str = "Explanation: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("explanation to embed in the prompt is empty")]
    EmptyExplanation,
    #[error("refinement history is empty")]
    EmptyHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    Generation,
    Evaluation,
}

/// A rendered prompt plus what kind of prompt it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub role: PromptRole,
    /// Set for refinement prompts only.
    pub history_mode: Option<HistoryMode>,
}

impl PromptText {
    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Number of feedback lines embedded in the prompt.
    pub fn feedback_count(&self) -> usize {
        count_feedback_blocks(&self.text)
    }
}

/// The labeled question/answer/distractor lines shared by all prompts and by
/// the fine-tuning export.
pub fn question_block(mcq: &Mcq) -> String {
    let mut block = format!("{QUESTION_LABEL}{}\n{ANSWER_LABEL}{}", mcq.stem, mcq.answer);
    for (k, distractor) in mcq.distractors.iter().enumerate() {
        let _ = write!(block, "\nDistractor {}: {}", k + 1, distractor);
    }
    block
}

/// [`question_block`] followed by an `Explanation:` line.
pub fn evaluation_block(mcq: &Mcq, explanation: &str) -> String {
    format!("{}\n{EXPLANATION_LABEL}{explanation}", question_block(mcq))
}

fn feedback_line(explanation: &str, score: f64) -> String {
    format!("{FEEDBACK_LEAD} {score:.2} and {explanation}.")
}

pub fn render_generation_initial(mcq: &Mcq) -> PromptText {
    PromptText {
        text: format!("{GENERATION_INSTRUCTION}\n{}", question_block(mcq)),
        role: PromptRole::Generation,
        history_mode: None,
    }
}

/// Initial prompt plus feedback on the most recent turn.
pub fn render_generation_refine_recent(
    mcq: &Mcq,
    prev_explanation: &str,
    prev_score: f64,
) -> Result<PromptText, PromptError> {
    let mut prompt = render_generation_refine_history(mcq, &[(prev_explanation, prev_score)])?;
    prompt.history_mode = Some(HistoryMode::RecentOnly);
    Ok(prompt)
}

/// Initial prompt plus feedback on every earlier turn, oldest first.
pub fn render_generation_refine_history<S: AsRef<str>>(
    mcq: &Mcq,
    history: &[(S, f64)],
) -> Result<PromptText, PromptError> {
    if history.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    let mut text = render_generation_initial(mcq).text;
    for (explanation, score) in history {
        let explanation = explanation.as_ref();
        if explanation.trim().is_empty() {
            return Err(PromptError::EmptyExplanation);
        }
        text.push('\n');
        text.push_str(&feedback_line(explanation, *score));
    }
    text.push('\n');
    text.push_str(CLOSING_REQUEST);
    Ok(PromptText {
        text,
        role: PromptRole::Generation,
        history_mode: Some(HistoryMode::AllHistory),
    })
}

pub fn render_evaluation(mcq: &Mcq, explanation: &str) -> Result<PromptText, PromptError> {
    if explanation.trim().is_empty() {
        return Err(PromptError::EmptyExplanation);
    }
    Ok(PromptText {
        text: format!("{EVALUATION_INSTRUCTION}\n{}", evaluation_block(mcq, explanation)),
        role: PromptRole::Evaluation,
        history_mode: None,
    })
}

pub fn count_feedback_blocks(prompt: &str) -> usize {
    prompt.lines().filter(|l| l.starts_with(FEEDBACK_LEAD)).count()
}

/// Recovers the explanation embedded in an evaluation prompt.
pub fn extract_explanation(prompt: &str) -> Option<&str> {
    let marker = format!("\n{EXPLANATION_LABEL}");
    prompt.rfind(&marker).map(|at| &prompt[at + marker.len()..])
}

/// Recovers the value of a labeled line (`Question: `, `Correct Answer: `).
pub fn extract_field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcq(n: usize) -> Mcq {
        Mcq::new(
            "q1",
            "What does ATP synthase produce?",
            "ATP",
            (1..=n).map(|k| format!("option {k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn initial_prompt_layout() {
        let p = render_generation_initial(&mcq(4));
        assert_eq!(p.text.lines().next().unwrap(), GENERATION_INSTRUCTION);
        assert_eq!(p.text.lines().filter(|l| l.starts_with("Distractor")).count(), 4);
        assert_eq!(p, render_generation_initial(&mcq(4)));
        assert_eq!(p.feedback_count(), 0);
    }

    #[test]
    fn refine_recent_substitutes_score_and_text() {
        let p = render_generation_refine_recent(&mcq(2), "E1", 3.5).unwrap();
        assert!(p.text.contains("3.50 and E1"));
        assert!(p.text.ends_with(CLOSING_REQUEST));
        assert!(p.text.contains(FEEDBACK_LEAD));
        assert_eq!(
            render_generation_refine_recent(&mcq(2), "", 3.5),
            Err(PromptError::EmptyExplanation)
        );
    }

    #[test]
    fn refine_history_order_and_growth() {
        let m = mcq(3);
        let p = render_generation_refine_history(&m, &[("E1", 3.0), ("E2", 3.5)]).unwrap();
        let first = p.text.find("E1").unwrap();
        let second = p.text.find("E2").unwrap();
        assert!(first < second);

        let one = render_generation_refine_history(&m, &[("E1", 3.0)]).unwrap();
        let recent = render_generation_refine_recent(&m, "E1", 3.0).unwrap();
        assert_eq!(one.text, recent.text);

        let mut history = Vec::new();
        let mut last_len = render_generation_initial(&m).text.len();
        for i in 0..6 {
            history.push((format!("E{i}"), 2.0 + i as f64 * 0.25));
            let len = render_generation_refine_history(&m, &history).unwrap().text.len();
            assert!(len > last_len);
            last_len = len;
        }
        assert_eq!(
            render_generation_refine_history::<&str>(&m, &[]),
            Err(PromptError::EmptyHistory)
        );
    }

    #[test]
    fn evaluation_prompt_layout() {
        let p = render_evaluation(&mcq(1), "E").unwrap();
        assert_eq!(p.text.lines().next().unwrap(), EVALUATION_INSTRUCTION);
        assert!(p.text.lines().any(|l| l == "Explanation: E"));
        assert_eq!(extract_explanation(&p.text), Some("E"));
        assert_eq!(extract_field(&p.text, ANSWER_LABEL), Some("ATP"));
        assert_eq!(render_evaluation(&mcq(1), " "), Err(PromptError::EmptyExplanation));
    }
}
