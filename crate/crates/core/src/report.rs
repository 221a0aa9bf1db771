//! Dataset-level summaries of loop traces and the evaluator benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::backends::{evaluate_explanation, TextBackend};
use crate::metrics::mse;
use crate::types::{AggregateReport, GenParams, IterationRecord, Mcq, RunTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("no completed traces to aggregate")]
    NoUsableTraces,
    #[error("no question could be evaluated")]
    NothingEvaluated,
}

/// Which record of each trace the averages describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregateMode {
    /// The record chosen by selection.
    #[default]
    Selected,
    /// Always the first record, i.e. the model without refinement.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(format!("unknown table format `{other}` (expected markdown or csv)")),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Averages over traces without a failure. Failed traces are only counted.
pub fn aggregate(
    label: impl Into<String>,
    traces: &[RunTrace],
    mode: AggregateMode,
) -> Result<AggregateReport, ReportError> {
    let usable: Vec<(&RunTrace, usize)> = traces
        .iter()
        .filter(|t| !t.is_failed())
        .filter_map(|t| {
            let index = match mode {
                AggregateMode::Selected => t.selected_index?,
                AggregateMode::Baseline => 1,
            };
            t.records.get(index.checked_sub(1)?).map(|_| (t, index))
        })
        .collect();
    if usable.is_empty() {
        return Err(ReportError::NoUsableTraces);
    }
    fn chosen<'a>(u: &(&'a RunTrace, usize)) -> &'a IterationRecord {
        &u.0.records[u.1 - 1]
    }

    let width = usable.iter().map(|(t, i)| t.records.len().max(*i)).max().unwrap_or(1);
    let mut histogram = vec![0; width];
    for (_, index) in &usable {
        histogram[index - 1] += 1;
    }

    Ok(AggregateReport {
        label: label.into(),
        n_questions: usable.len(),
        n_failed: traces.len() - usable.len(),
        avg_iteration_step: usable.iter().map(|(_, i)| *i as f64).sum::<f64>() / usable.len() as f64,
        avg_rating: usable.iter().map(|u| chosen(u).rating).sum::<f64>() / usable.len() as f64,
        avg_bleu: mean(usable.iter().filter_map(|u| chosen(u).bleu)),
        avg_embed_f1: mean(usable.iter().filter_map(|u| chosen(u).embed_f1)),
        histogram,
    })
}

pub const TABLE_COLUMNS: [&str; 5] = [
    "Models",
    "# Iteration Step",
    "Avg Quality Rating Score",
    "Avg BLEU Score",
    "Avg BERT Score",
];
pub const CSV_EXTRA_COLUMNS: [&str; 2] = ["# Questions", "# Failed"];

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

fn markdown_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

/// Renders reports in the layout of a results table, one row per report.
/// Markdown rounds to two decimals; CSV keeps full precision and adds the
/// question and failure counts.
pub fn render_table(reports: &[AggregateReport], format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => {
            let mut out = markdown_row(&TABLE_COLUMNS.map(String::from));
            out.push_str(&markdown_row(&TABLE_COLUMNS.map(|_| "---".to_string())));
            for r in reports {
                out.push_str(&markdown_row(&[
                    r.label.clone(),
                    cell(Some(r.avg_iteration_step)),
                    cell(Some(r.avg_rating)),
                    cell(r.avg_bleu),
                    cell(r.avg_embed_f1),
                ]));
            }
            let failures: Vec<String> = reports
                .iter()
                .filter(|r| r.n_failed > 0)
                .map(|r| format!("{} ({})", r.label, r.n_failed))
                .collect();
            if !failures.is_empty() {
                let _ = writeln!(out, "\nFailed traces excluded: {}", failures.join(", "));
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header = TABLE_COLUMNS.iter().chain(CSV_EXTRA_COLUMNS.iter());
            w.write_record(header).expect("in-memory csv write");
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for r in reports {
                w.write_record([
                    r.label.clone(),
                    r.avg_iteration_step.to_string(),
                    r.avg_rating.to_string(),
                    opt(r.avg_bleu),
                    opt(r.avg_embed_f1),
                    r.n_questions.to_string(),
                    r.n_failed.to_string(),
                ])
                .expect("in-memory csv write");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
        }
    }
}

/// One row per report with the count of traces whose best record came at
/// each iteration.
pub fn render_histogram(reports: &[AggregateReport], format: TableFormat) -> String {
    let width = reports.iter().map(|r| r.histogram.len()).max().unwrap_or(0);
    let mut header = vec!["Models".to_string()];
    header.extend((1..=width).map(|i| i.to_string()));
    let rows = reports.iter().map(|r| {
        let mut row = vec![r.label.clone()];
        row.extend((0..width).map(|i| r.histogram.get(i).copied().unwrap_or(0).to_string()));
        row
    });
    match format {
        TableFormat::Markdown => {
            let mut out = markdown_row(&header);
            out.push_str(&markdown_row(&vec!["---".to_string(); header.len()]));
            for row in rows {
                out.push_str(&markdown_row(&row));
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).expect("in-memory csv write");
            for row in rows {
                w.write_record(&row).expect("in-memory csv write");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
        }
    }
}

/// Subject tag used for questions without one.
pub const UNSPECIFIED_SUBJECT: &str = "unspecified";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    pub mcq_id: String,
    pub subject: String,
    pub predicted: f64,
    pub truth: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectMse {
    pub n: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub subjects: BTreeMap<String, SubjectMse>,
    pub overall: SubjectMse,
    pub residuals: Vec<Residual>,
    /// Questions that could not be scored, with the reason.
    pub excluded: Vec<(String, String)>,
}

impl BenchmarkReport {
    pub fn render(&self, format: TableFormat) -> String {
        let mut rows: Vec<[String; 3]> = self
            .subjects
            .iter()
            .map(|(s, m)| [s.clone(), m.n.to_string(), format!("{:.2}", m.mse)])
            .collect();
        rows.push([
            "All".into(),
            self.overall.n.to_string(),
            format!("{:.2}", self.overall.mse),
        ]);
        let header = ["Subject", "# Questions", "MSE"];
        match format {
            TableFormat::Markdown => {
                let mut out = markdown_row(&header.map(String::from));
                out.push_str(&markdown_row(&header.map(|_| "---".to_string())));
                for row in &rows {
                    out.push_str(&markdown_row(row));
                }
                if !self.excluded.is_empty() {
                    let _ = writeln!(out, "\nExcluded questions: {}", self.excluded.len());
                }
                out
            }
            TableFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(header).expect("in-memory csv write");
                for row in &rows {
                    w.write_record(row).expect("in-memory csv write");
                }
                String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
            }
        }
    }
}

/// Scores each question's own explanation with the evaluator and compares
/// the predictions with the students' average ratings.
pub fn evaluator_benchmark(
    mcqs: &[Mcq],
    evaluator: &dyn TextBackend,
    params: &GenParams,
    retries: u32,
) -> Result<BenchmarkReport, ReportError> {
    let mut residuals = Vec::new();
    let mut excluded = Vec::new();
    for mcq in mcqs {
        let (Some(explanation), Some(truth)) = (mcq.explanation.as_deref(), mcq.avg_rating) else {
            excluded.push((mcq.id.clone(), "missing explanation or rating".to_string()));
            continue;
        };
        match evaluate_explanation(evaluator, mcq, explanation, params, retries, 0) {
            Ok(rating) => residuals.push(Residual {
                mcq_id: mcq.id.clone(),
                subject: mcq.subject.clone().unwrap_or_else(|| UNSPECIFIED_SUBJECT.into()),
                predicted: rating.value,
                truth,
                residual: rating.value - truth,
            }),
            Err(e) => excluded.push((mcq.id.clone(), e.to_string())),
        }
    }
    if residuals.is_empty() {
        return Err(ReportError::NothingEvaluated);
    }

    let score = |rows: &[&Residual]| {
        let predicted: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
        let truth: Vec<f64> = rows.iter().map(|r| r.truth).collect();
        SubjectMse {
            n: rows.len(),
            mse: mse(&predicted, &truth).expect("non-empty equal-length vectors"),
        }
    };
    let mut grouped: BTreeMap<String, Vec<&Residual>> = BTreeMap::new();
    for r in &residuals {
        grouped.entry(r.subject.clone()).or_default().push(r);
    }
    let subjects = grouped.iter().map(|(s, rows)| (s.clone(), score(rows))).collect();
    let overall = score(&residuals.iter().collect::<Vec<_>>());
    Ok(BenchmarkReport {
        subjects,
        overall,
        residuals,
        excluded,
    })
}
