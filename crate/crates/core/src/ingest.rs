//! Dataset ingestion, quality filtering, summary statistics and
//! instruction-tuning export.
//!
//! The canonical on-disk dataset is JSON lines with one question per line:
//!
//! ```text
//! {"id":"q1","stem":"...","answer":"...","distractors":["..."],"explanation":null,"avg_rating":3.4,"num_ratings":12}
//! ```
//!
//! CSV exports from other platforms are read through a [`ColumnMap`].

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts;
use crate::types::{Mcq, MAX_DISTRACTORS, MAX_RATING};

/// Minimum rating a question needs to enter the generation training set.
pub const MIN_GENERATION_RATING: f64 = 3.0;
/// Explanations must have strictly more words than this.
pub const MIN_EXPLANATION_WORDS: usize = 10;
/// Minimum number of student ratings for any question to be used.
pub const MIN_NUM_RATINGS: u32 = 10;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown dataset format `{0}` (expected jsonl or csv)")]
    UnknownFormat(String),
    #[error("mapped column `{0}` is not present in the csv header")]
    MissingColumn(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A single broken invariant on an incoming record.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationError {
    MissingField(&'static str),
    RatingOutOfRange(f64),
    DistractorCount(usize),
    EmptyDistractor(usize),
    NegativeRatingCount(i64),
    RatingWithoutRatings,
    MissingRating,
    DuplicateId(String),
    Malformed(String),
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationError::MissingField(name) => write!(f, "missing {name}"),
            ValidationError::RatingOutOfRange(v) => write!(f, "rating out of range: {v} not in [0, 5]"),
            ValidationError::DistractorCount(n) => {
                write!(f, "distractor count {n} not in 1..={MAX_DISTRACTORS}")
            }
            ValidationError::EmptyDistractor(k) => write!(f, "distractor {k} is empty"),
            ValidationError::NegativeRatingCount(n) => write!(f, "num_ratings {n} is negative"),
            ValidationError::RatingWithoutRatings => {
                write!(f, "avg_rating given but num_ratings is 0")
            }
            ValidationError::MissingRating => write!(f, "missing avg_rating although num_ratings > 0"),
            ValidationError::DuplicateId(id) => write!(f, "duplicate id `{id}`"),
            ValidationError::Malformed(msg) => write!(f, "malformed record: {msg}"),
        }
    }
}

/// Loosely-typed record as it arrives from a file, before validation.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawMcq {
    pub id: Option<String>,
    pub stem: Option<String>,
    pub answer: Option<String>,
    pub distractors: Option<Vec<String>>,
    pub explanation: Option<String>,
    pub avg_rating: Option<f64>,
    pub num_ratings: Option<i64>,
    pub subject: Option<String>,
}

fn non_blank(value: Option<String>) -> Option<String> {
    value.filter(|s| !s.trim().is_empty())
}

/// Checks every invariant of [`Mcq`] and reports all violations at once.
pub fn validate_mcq(raw: RawMcq) -> Result<Mcq, Vec<ValidationError>> {
    let mut errors = Vec::new();

    let id = non_blank(raw.id);
    let stem = non_blank(raw.stem);
    let answer = non_blank(raw.answer);
    if id.is_none() {
        errors.push(ValidationError::MissingField("id"));
    }
    if stem.is_none() {
        errors.push(ValidationError::MissingField("stem"));
    }
    if answer.is_none() {
        errors.push(ValidationError::MissingField("answer"));
    }

    let distractors = raw.distractors.unwrap_or_default();
    if distractors.is_empty() || distractors.len() > MAX_DISTRACTORS {
        errors.push(ValidationError::DistractorCount(distractors.len()));
    }
    for (k, d) in distractors.iter().enumerate() {
        if d.trim().is_empty() {
            errors.push(ValidationError::EmptyDistractor(k + 1));
        }
    }

    let num_ratings = match raw.num_ratings.unwrap_or(0) {
        n if n < 0 => {
            errors.push(ValidationError::NegativeRatingCount(n));
            0
        }
        n => u32::try_from(n).unwrap_or(u32::MAX),
    };
    match raw.avg_rating {
        Some(r) if !(0.0..=MAX_RATING).contains(&r) => errors.push(ValidationError::RatingOutOfRange(r)),
        Some(_) if num_ratings == 0 && raw.num_ratings.is_none_or(|n| n >= 0) => {
            errors.push(ValidationError::RatingWithoutRatings)
        }
        None if num_ratings > 0 => errors.push(ValidationError::MissingRating),
        _ => {}
    }

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(Mcq {
        id: id.unwrap_or_default(),
        stem: stem.unwrap_or_default(),
        answer: answer.unwrap_or_default(),
        distractors,
        explanation: non_blank(raw.explanation),
        avg_rating: raw.avg_rating,
        num_ratings,
        subject: non_blank(raw.subject),
    })
}

/// Maps canonical fields onto the columns of a CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub id: String,
    pub stem: String,
    pub answer: String,
    /// Distractor columns in display order; empty cells are skipped.
    pub distractors: Vec<String>,
    pub explanation: Option<String>,
    pub avg_rating: String,
    pub num_ratings: String,
    pub subject: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            stem: "stem".into(),
            answer: "answer".into(),
            distractors: (1..=MAX_DISTRACTORS).map(|k| format!("distractor_{k}")).collect(),
            explanation: Some("explanation".into()),
            avg_rating: "avg_rating".into(),
            num_ratings: "num_ratings".into(),
            subject: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetFormat {
    Jsonl,
    Csv(ColumnMap),
}

impl FromStr for DatasetFormat {
    type Err = IngestError;

    /// Parses a format name; CSV gets the default column map.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv(ColumnMap::default())),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

/// Errors attached to one input record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    /// 1-based line number in the input.
    pub line: u64,
    pub errors: Vec<ValidationError>,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line)?;
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedDataset {
    pub mcqs: Vec<Mcq>,
    pub errors: Vec<RecordError>,
}

/// Reads a dataset. Malformed rows land in `errors` with their line number;
/// only stream-level problems abort.
pub fn parse_dataset<R: Read>(reader: R, format: &DatasetFormat) -> Result<ParsedDataset, IngestError> {
    let mut out = ParsedDataset::default();
    let mut seen = HashSet::new();
    let mut accept = |line: u64, raw: Result<RawMcq, ValidationError>, out: &mut ParsedDataset| {
        let result = raw.map_err(|e| vec![e]).and_then(validate_mcq).and_then(|mcq| {
            if seen.insert(mcq.id.clone()) {
                Ok(mcq)
            } else {
                Err(vec![ValidationError::DuplicateId(mcq.id)])
            }
        });
        match result {
            Ok(mcq) => out.mcqs.push(mcq),
            Err(errors) => out.errors.push(RecordError { line, errors }),
        }
    };

    match format {
        DatasetFormat::Jsonl => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw = serde_json::from_str::<RawMcq>(&line).map_err(|e| ValidationError::Malformed(e.to_string()));
                accept(i as u64 + 1, raw, &mut out);
            }
        }
        DatasetFormat::Csv(map) => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
            let header = rdr.headers()?.clone();
            let column = |name: &str| {
                header
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
            };
            let id = column(&map.id)?;
            let stem = column(&map.stem)?;
            let answer = column(&map.answer)?;
            let distractors = map
                .distractors
                .iter()
                .map(|d| column(d))
                .collect::<Result<Vec<_>, _>>()?;
            let explanation = map.explanation.as_deref().map(column).transpose()?;
            let avg_rating = column(&map.avg_rating)?;
            let num_ratings = column(&map.num_ratings)?;
            let subject = map.subject.as_deref().map(column).transpose()?;

            for row in rdr.records() {
                let row = row?;
                let line = row.position().map_or(0, |p| p.line());
                let cell = |idx: usize| row.get(idx).map(str::to_string).filter(|s| !s.trim().is_empty());
                let raw = (|| {
                    let avg = cell(avg_rating)
                        .map(|s| s.trim().parse::<f64>())
                        .transpose()
                        .map_err(|_| ValidationError::Malformed("avg_rating is not a number".into()))?;
                    let num = cell(num_ratings)
                        .map(|s| s.trim().parse::<i64>())
                        .transpose()
                        .map_err(|_| ValidationError::Malformed("num_ratings is not an integer".into()))?;
                    Ok(RawMcq {
                        id: cell(id),
                        stem: cell(stem),
                        answer: cell(answer),
                        distractors: Some(distractors.iter().filter_map(|&d| cell(d)).collect()),
                        explanation: explanation.and_then(cell),
                        avg_rating: avg,
                        num_ratings: num,
                        subject: subject.and_then(cell),
                    })
                })();
                accept(line, raw, &mut out);
            }
        }
    }
    Ok(out)
}

/// Writes questions as canonical JSON lines.
pub fn write_dataset<W: Write>(mcqs: &[Mcq], mut out: W) -> Result<(), IngestError> {
    for mcq in mcqs {
        serde_json::to_writer(&mut out, mcq)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Number of maximal whitespace-separated runs in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// True when the stem embeds an image (HTML `<img` or markdown `![`).
pub fn detect_image(stem: &str) -> bool {
    stem.contains("![") || stem.to_ascii_lowercase().contains("<img")
}

fn usable(mcq: &Mcq) -> bool {
    mcq.explanation.is_some() && mcq.num_ratings >= MIN_NUM_RATINGS && !detect_image(&mcq.stem)
}

/// Questions suitable for training the explanation generator: well rated,
/// with a substantive explanation, enough ratings and a text-only stem.
pub fn filter_for_generation(mcqs: &[Mcq]) -> Vec<Mcq> {
    mcqs.iter()
        .filter(|m| {
            usable(m)
                && m.avg_rating.is_some_and(|r| r >= MIN_GENERATION_RATING)
                && m.explanation
                    .as_deref()
                    .is_some_and(|e| word_count(e) > MIN_EXPLANATION_WORDS)
        })
        .cloned()
        .collect()
}

/// Questions suitable for training the rating evaluator. Low-rated questions
/// are kept on purpose.
pub fn filter_for_evaluation(mcqs: &[Mcq]) -> Vec<Mcq> {
    mcqs.iter().filter(|m| usable(m)).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_mcqs: usize,
    pub total_ratings: u64,
    pub ratings_per_mcq: f64,
    /// Mean explanation length in words over questions that have one.
    pub avg_explanation_words: Option<f64>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# MCQs          {}", self.n_mcqs)?;
        writeln!(f, "# Ratings       {}", self.total_ratings)?;
        writeln!(f, "# Ratings/MCQ   {:.2}", self.ratings_per_mcq)?;
        match self.avg_explanation_words {
            Some(w) => write!(f, "Avg exp length  {w:.2}"),
            None => write!(f, "Avg exp length  -"),
        }
    }
}

pub fn dataset_stats(mcqs: &[Mcq]) -> Result<DatasetStats, IngestError> {
    if mcqs.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let total_ratings: u64 = mcqs.iter().map(|m| u64::from(m.num_ratings)).sum();
    let lengths: Vec<usize> = mcqs
        .iter()
        .filter_map(|m| m.explanation.as_deref())
        .map(word_count)
        .collect();
    let avg_explanation_words =
        (!lengths.is_empty()).then(|| lengths.iter().sum::<usize>() as f64 / lengths.len() as f64);
    Ok(DatasetStats {
        n_mcqs: mcqs.len(),
        total_ratings,
        ratings_per_mcq: total_ratings as f64 / mcqs.len() as f64,
        avg_explanation_words,
    })
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// Hyperparameters written next to an export for external trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMetadata {
    pub epochs: u32,
    pub batch_size: u32,
    pub max_seq_length: u32,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 1,
            max_seq_length: 512,
            learning_rate: 2e-5,
            warmup_ratio: 0.03,
        }
    }
}

impl TrainingMetadata {
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epochs={}", self.epochs)?;
        writeln!(out, "batch_size={}", self.batch_size)?;
        writeln!(out, "max_seq_length={}", self.max_seq_length)?;
        writeln!(out, "learning_rate={:e}", self.learning_rate)?;
        writeln!(out, "warmup_ratio={}", self.warmup_ratio)?;
        out.flush()
    }
}

fn write_records<W: Write>(records: impl Iterator<Item = FineTuneRecord>, mut out: W) -> Result<usize, IngestError> {
    let mut n = 0;
    for record in records {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Writes the generator training set and its hyperparameter sidecar.
/// Questions without an explanation are skipped.
pub fn export_finetune_generation<W: Write, M: Write>(mcqs: &[Mcq], out: W, sidecar: M) -> Result<usize, IngestError> {
    let n = write_records(
        mcqs.iter().filter_map(|m| {
            Some(FineTuneRecord {
                instruction: prompts::GENERATION_INSTRUCTION.to_string(),
                input: prompts::question_block(m),
                output: m.explanation.clone()?,
            })
        }),
        out,
    )?;
    TrainingMetadata::default().write_to(sidecar)?;
    Ok(n)
}

/// Writes the evaluator training set; the target is the average rating with
/// two decimals. Questions lacking an explanation or rating are skipped.
pub fn export_finetune_evaluation<W: Write>(mcqs: &[Mcq], out: W) -> Result<usize, IngestError> {
    write_records(
        mcqs.iter().filter_map(|m| {
            let explanation = m.explanation.as_deref()?;
            Some(FineTuneRecord {
                instruction: prompts::EVALUATION_INSTRUCTION.to_string(),
                input: prompts::evaluation_block(m, explanation),
                output: format!("{:.2}", m.avg_rating?),
            })
        }),
        out,
    )
}
