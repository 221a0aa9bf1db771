//! Domain model shared by every stage of the pipeline.
//!
//! Values here are plain data: once validated they are never mutated, so they
//! can be handed to any number of worker threads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Upper bound of the student quality-rating scale.
pub const MAX_RATING: f64 = 5.0;
/// Most distractors a question may carry.
pub const MAX_DISTRACTORS: usize = 4;

/// A learnersourced multiple-choice question.
///
/// Construct through [`crate::ingest::validate_mcq`] (or [`Mcq::new`]) so the
/// invariants below always hold:
///
/// * between one and four distractors
/// * `avg_rating` in `[0, 5]`, present exactly when `num_ratings > 0`
/// * non-empty id, stem and answer
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mcq {
    pub id: String,
    pub stem: String,
    pub answer: String,
    pub distractors: Vec<String>,
    pub explanation: Option<String>,
    pub avg_rating: Option<f64>,
    pub num_ratings: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl Mcq {
    /// Builds a question with no explanation or ratings, validating the shape.
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        answer: impl Into<String>,
        distractors: Vec<String>,
    ) -> Result<Self, Vec<crate::ingest::ValidationError>> {
        crate::ingest::validate_mcq(crate::ingest::RawMcq {
            id: Some(id.into()),
            stem: Some(stem.into()),
            answer: Some(answer.into()),
            distractors: Some(distractors),
            ..Default::default()
        })
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        let text = explanation.into();
        self.explanation = if text.trim().is_empty() { None } else { Some(text) };
        self
    }

    /// Sets the rating aggregate. Panics if the pair breaks the rating invariants.
    pub fn with_ratings(mut self, avg_rating: f64, num_ratings: u32) -> Self {
        assert!(
            (0.0..=MAX_RATING).contains(&avg_rating),
            "avg_rating {avg_rating} outside [0, 5]"
        );
        assert!(num_ratings > 0, "a rating average needs at least one rating");
        self.avg_rating = Some(avg_rating);
        self.num_ratings = num_ratings;
        self
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }
}

/// Which earlier turns are folded into a refinement prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Only the previous explanation and its rating.
    #[default]
    RecentOnly,
    /// Every earlier explanation and rating, oldest first.
    AllHistory,
}

impl fmt::Display for HistoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistoryMode::RecentOnly => "recent_only",
            HistoryMode::AllHistory => "all_history",
        })
    }
}

impl std::str::FromStr for HistoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "recent_only" | "recent" => Ok(HistoryMode::RecentOnly),
            "all_history" | "all" => Ok(HistoryMode::AllHistory),
            other => Err(format!(
                "unknown history mode `{other}` (expected recent_only or all_history)"
            )),
        }
    }
}

/// One generate-then-evaluate turn of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based position within the run.
    pub index: usize,
    pub prompt: String,
    pub generated_explanation: String,
    pub rating: f64,
    pub bleu: Option<f64>,
    pub embed_f1: Option<f64>,
    /// Present exactly when both `bleu` and `embed_f1` are.
    pub normalized_avg: Option<f64>,
}

/// Where a run stopped early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    /// Iteration that could not be completed.
    pub iteration: usize,
    pub stage: FailureStage,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Prompt,
    Generation,
    Evaluation,
    Embedding,
}

/// Version tag written into every serialized trace.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

fn trace_schema_version() -> u32 {
    TRACE_SCHEMA_VERSION
}

/// Full loop history for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    #[serde(default = "trace_schema_version")]
    pub schema_version: u32,
    pub mcq_id: String,
    pub history_mode: HistoryMode,
    pub records: Vec<IterationRecord>,
    /// 1-based index of the chosen record; `None` only when nothing completed.
    pub selected_index: Option<usize>,
    pub reference_explanation: Option<String>,
    pub failure: Option<RunFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl RunTrace {
    pub fn new(mcq_id: impl Into<String>, history_mode: HistoryMode) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            mcq_id: mcq_id.into(),
            history_mode,
            records: Vec::new(),
            selected_index: None,
            reference_explanation: None,
            failure: None,
            subject: None,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    /// The record picked by selection, if any.
    pub fn selected(&self) -> Option<&IterationRecord> {
        self.selected_index
            .and_then(|i| i.checked_sub(1))
            .and_then(|i| self.records.get(i))
    }
}

/// Sampling knobs forwarded to generation-capable backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_max_output_tokens() -> u32 {
    512
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            seed: None,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(ConfigError::Invalid("max_output_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Iteration count used when none is configured. Six matches the widest
/// iteration histogram reported for the method.
pub const DEFAULT_ITERATIONS: usize = 6;

/// Settings for one run of the refinement loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    /// Total generations per question, first one included.
    pub iterations: usize,
    pub history_mode: HistoryMode,
    pub generator_id: String,
    pub evaluator_id: String,
    pub params: GenParams,
    /// Extra evaluation attempts after an unparseable rating.
    pub evaluation_retries: u32,
    pub concurrency: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            history_mode: HistoryMode::RecentOnly,
            generator_id: "generator".into(),
            evaluator_id: "evaluator".into(),
            params: GenParams::default(),
            evaluation_retries: 2,
            concurrency: 1,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(ConfigError::Invalid("iterations must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be >= 1".into()));
        }
        self.params.validate()
    }
}

/// Dataset-level summary of a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub label: String,
    /// Traces that completed and contributed to the averages.
    pub n_questions: usize,
    /// Traces excluded because they carry a failure.
    pub n_failed: usize,
    pub avg_iteration_step: f64,
    pub avg_rating: f64,
    pub avg_bleu: Option<f64>,
    pub avg_embed_f1: Option<f64>,
    /// `histogram[i]` counts traces whose selected index is `i + 1`.
    pub histogram: Vec<usize>,
}

impl AggregateReport {
    /// Mean iteration step recomputed from the histogram alone.
    pub fn iteration_step_from_histogram(&self) -> f64 {
        let total: usize = self.histogram.iter().sum();
        let weighted: usize = self
            .histogram
            .iter()
            .enumerate()
            .map(|(i, count)| (i + 1) * count)
            .sum();
        weighted as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_mode_parses_both_spellings() {
        assert_eq!("all-history".parse::<HistoryMode>().unwrap(), HistoryMode::AllHistory);
        assert_eq!("recent_only".parse::<HistoryMode>().unwrap(), HistoryMode::RecentOnly);
        assert!("everything".parse::<HistoryMode>().is_err());
    }

    #[test]
    fn loop_config_rejects_zero_iterations() {
        let config = LoopConfig {
            iterations: 0,
            ..LoopConfig::default()
        };
        assert!(config.validate().is_err());
        assert!(LoopConfig::default().validate().is_ok());
    }

    #[test]
    fn gen_params_bounds() {
        let mut params = GenParams {
            temperature: -0.1,
            ..GenParams::default()
        };
        assert!(params.validate().is_err());
        params.temperature = 0.7;
        params.max_output_tokens = 0;
        assert!(params.validate().is_err());
    }

    #[test]
    fn selected_record_lookup() {
        let mut trace = RunTrace::new("q", HistoryMode::RecentOnly);
        assert!(trace.selected().is_none());
        trace.records.push(IterationRecord {
            index: 1,
            prompt: "p".into(),
            generated_explanation: "e".into(),
            rating: 3.0,
            bleu: None,
            embed_f1: None,
            normalized_avg: None,
        });
        trace.selected_index = Some(1);
        assert_eq!(trace.selected().unwrap().rating, 3.0);
    }

    #[test]
    #[should_panic]
    fn with_ratings_rejects_out_of_range() {
        Mcq::new("q", "s", "a", vec!["d".into()]).unwrap().with_ratings(5.5, 3);
    }
}
