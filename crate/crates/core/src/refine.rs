//! The generate → evaluate → feed-back loop, best-iteration selection, and
//! dataset-level orchestration with resumable trace files.
//!
//! Within one question the iterations are strictly sequential. Across
//! questions a fixed pool of worker threads pulls work; finished traces are
//! handed to a single writer that appends them in input order, so the trace
//! file is byte-identical whatever the worker count.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use thiserror::Error;

use crate::backends::{
    embed_tokens, evaluate_explanation, generate_text, BackendError, CallContext, EmbeddingBackend, TextBackend,
};
use crate::metrics::{bleu, embedding_f1, normalized_average, MetricTriple};
use crate::prompts::{
    render_generation_initial, render_generation_refine_history, render_generation_refine_recent, PromptText,
};
use crate::types::{FailureStage, HistoryMode, IterationRecord, LoopConfig, Mcq, RunFailure, RunTrace};

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("trace file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace file {path} line {line} is not a valid trace: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("trace sink write failed: {0}")]
    Write(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot select from an empty trace")]
pub struct EmptyTrace;

/// The three backends a run needs. The embedder is optional; without it the
/// embedding score and normalized average are left empty.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn TextBackend>,
    pub evaluator: Arc<dyn TextBackend>,
    pub embedder: Option<Arc<dyn EmbeddingBackend>>,
}

/// Picks the best record: highest normalized average when any record has
/// one, otherwise highest rating. Ties go to the earliest record. Returns a
/// 1-based index.
pub fn select_best(records: &[IterationRecord]) -> Result<usize, EmptyTrace> {
    if records.is_empty() {
        return Err(EmptyTrace);
    }
    let use_average = records.iter().any(|r| r.normalized_avg.is_some());
    let score = |r: &IterationRecord| {
        if use_average {
            r.normalized_avg.unwrap_or(f64::NEG_INFINITY)
        } else {
            r.rating
        }
    };
    let mut best = 0;
    for (i, record) in records.iter().enumerate().skip(1) {
        if score(record) > score(&records[best]) {
            best = i;
        }
    }
    Ok(records[best].index)
}

fn fail(trace: &mut RunTrace, iteration: usize, stage: FailureStage, err: impl std::fmt::Display) {
    tracing::warn!(mcq = %trace.mcq_id, iteration, ?stage, error = %err, "run stopped early");
    trace.failure = Some(RunFailure {
        iteration,
        stage,
        message: err.to_string(),
    });
}

fn refinement_prompt(mcq: &Mcq, mode: HistoryMode, records: &[IterationRecord]) -> Result<PromptText, BackendError> {
    let prompt = match (mode, records.last()) {
        (_, None) => render_generation_initial(mcq),
        (HistoryMode::RecentOnly, Some(last)) => {
            render_generation_refine_recent(mcq, &last.generated_explanation, last.rating)?
        }
        (HistoryMode::AllHistory, Some(_)) => {
            let history: Vec<(&str, f64)> = records
                .iter()
                .map(|r| (r.generated_explanation.as_str(), r.rating))
                .collect();
            render_generation_refine_history(mcq, &history)?
        }
    };
    Ok(prompt)
}

/// Runs every iteration for one question and records the outcome.
///
/// A failure at iteration `k` stops the run; records `1..k` are kept and the
/// failure is stored on the trace.
pub fn run_question(mcq: &Mcq, config: &LoopConfig, backends: &Backends) -> RunTrace {
    let mut trace = RunTrace::new(mcq.id.clone(), config.history_mode);
    trace.reference_explanation = mcq.explanation.clone();
    trace.subject = mcq.subject.clone();

    let reference = mcq.explanation.as_deref();
    let reference_vectors = match (reference, &backends.embedder) {
        (Some(text), Some(embedder)) => match embed_tokens(embedder.as_ref(), text) {
            Ok(tokens) => Some(tokens.into_iter().map(|t| t.vector).collect::<Vec<_>>()),
            Err(e) => {
                fail(&mut trace, 1, FailureStage::Embedding, e);
                return trace;
            }
        },
        _ => None,
    };

    for k in 1..=config.iterations {
        let prompt = match refinement_prompt(mcq, config.history_mode, &trace.records) {
            Ok(p) => p,
            Err(e) => {
                fail(&mut trace, k, FailureStage::Prompt, e);
                break;
            }
        };
        let generated = match generate_text(
            backends.generator.as_ref(),
            &prompt,
            &config.params,
            &CallContext::new(&mcq.id, k),
        ) {
            Ok(c) => c.text,
            Err(e @ BackendError::TruncationRisk { .. }) => {
                fail(&mut trace, k, FailureStage::Prompt, e);
                break;
            }
            Err(e) => {
                fail(&mut trace, k, FailureStage::Generation, e);
                break;
            }
        };
        let rating = match evaluate_explanation(
            backends.evaluator.as_ref(),
            mcq,
            &generated,
            &config.params,
            config.evaluation_retries,
            k,
        ) {
            Ok(r) => r.value,
            Err(e) => {
                fail(&mut trace, k, FailureStage::Evaluation, e);
                break;
            }
        };

        let bleu_score = reference.map(|r| bleu(&generated, r));
        let embed_score = match (&reference_vectors, &backends.embedder) {
            (Some(ref_vecs), Some(embedder)) => {
                let scored = embed_tokens(embedder.as_ref(), &generated)
                    .map_err(|e| e.to_string())
                    .and_then(|tokens| {
                        let vecs: Vec<Vec<f64>> = tokens.into_iter().map(|t| t.vector).collect();
                        embedding_f1(&vecs, ref_vecs).map_err(|e| e.to_string())
                    });
                match scored {
                    Ok(s) => Some(s.f1),
                    Err(e) => {
                        fail(&mut trace, k, FailureStage::Embedding, e);
                        break;
                    }
                }
            }
            _ => None,
        };
        let normalized_avg = match (bleu_score, embed_score) {
            (Some(b), Some(e)) => Some(normalized_average(MetricTriple::new(rating, b, e))),
            _ => None,
        };

        trace.records.push(IterationRecord {
            index: k,
            prompt: prompt.text,
            generated_explanation: generated,
            rating,
            bleu: bleu_score,
            embed_f1: embed_score,
            normalized_avg,
        });
    }

    trace.selected_index = select_best(&trace.records).ok();
    trace
}

/// Destination for finished traces; also answers which questions are done.
pub trait TraceSink: Send {
    fn contains(&self, mcq_id: &str) -> bool;
    fn append(&mut self, trace: &RunTrace) -> Result<(), SinkError>;
}

/// Append-only JSON-lines trace file.
///
/// Opening an existing file loads the ids already present. A final line cut
/// short by a crash (no trailing newline, unparseable) is truncated away.
pub struct JsonlTraceFile {
    path: PathBuf,
    file: File,
    ids: HashSet<String>,
}

impl JsonlTraceFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SinkError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| SinkError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;

        let mut ids = HashSet::new();
        let mut valid_len = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = line.ends_with('\n');
            if line.trim().is_empty() {
                valid_len += n as u64;
                continue;
            }
            if !complete {
                tracing::warn!(path = %path.display(), line = line_no, "dropping truncated final trace line");
                break;
            }
            let trace = serde_json::from_str::<RunTrace>(line.trim_end()).map_err(|e| SinkError::Corrupt {
                path: path.clone(),
                line: line_no,
                message: e.to_string(),
            })?;
            ids.insert(trace.mcq_id);
            valid_len += n as u64;
        }
        drop(reader);
        if file.metadata().map_err(io)?.len() != valid_len {
            file.set_len(valid_len).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
        }
        Ok(Self { path, file, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl TraceSink for JsonlTraceFile {
    fn contains(&self, mcq_id: &str) -> bool {
        self.ids.contains(mcq_id)
    }

    fn append(&mut self, trace: &RunTrace) -> Result<(), SinkError> {
        let mut line = serde_json::to_string(trace).map_err(|e| SinkError::Write(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| SinkError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.ids.insert(trace.mcq_id.clone());
        Ok(())
    }
}

/// In-memory sink holding serialized lines.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub lines: Vec<String>,
    ids: HashSet<String>,
}

impl MemorySink {
    pub fn with_ids<I: IntoIterator<Item = String>>(ids: I) -> Self {
        Self {
            lines: Vec::new(),
            ids: ids.into_iter().collect(),
        }
    }
}

impl TraceSink for MemorySink {
    fn contains(&self, mcq_id: &str) -> bool {
        self.ids.contains(mcq_id)
    }

    fn append(&mut self, trace: &RunTrace) -> Result<(), SinkError> {
        self.lines
            .push(serde_json::to_string(trace).map_err(|e| SinkError::Write(e.to_string()))?);
        self.ids.insert(trace.mcq_id.clone());
        Ok(())
    }
}

/// Result of a dataset run.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    /// Newly produced traces, in input order.
    pub traces: Vec<RunTrace>,
    /// Questions skipped because the sink already had them.
    pub skipped: usize,
}

impl DatasetRun {
    pub fn failed(&self) -> usize {
        self.traces.iter().filter(|t| t.is_failed()).count()
    }
}

/// Runs the loop for every question the sink does not already contain.
///
/// Per-question failures are recorded on their traces; only a sink failure
/// aborts the run.
pub fn run_dataset(
    mcqs: &[Mcq],
    config: &LoopConfig,
    backends: &Backends,
    sink: &mut dyn TraceSink,
) -> Result<DatasetRun, SinkError> {
    let mut seen = HashSet::new();
    let pending: Vec<&Mcq> = mcqs
        .iter()
        .filter(|m| !sink.contains(&m.id) && seen.insert(m.id.as_str()))
        .collect();
    let skipped = mcqs.len() - pending.len();
    if skipped > 0 {
        tracing::info!(skipped, "questions already present in the trace sink");
    }

    let workers = config.concurrency.max(1).min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, RunTrace)>();
    let mut traces = Vec::with_capacity(pending.len());
    let mut outcome = Ok(());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort, pending) = (&next, &abort, &pending);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let pos = next.fetch_add(1, Ordering::Relaxed);
                let Some(mcq) = pending.get(pos) else { break };
                let trace = run_question(mcq, config, backends);
                if tx.send((pos, trace)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffered = BTreeMap::new();
        let mut expected = 0;
        for (pos, trace) in rx {
            buffered.insert(pos, trace);
            while let Some(trace) = buffered.remove(&expected) {
                if let Err(e) = sink.append(&trace) {
                    abort.store(true, Ordering::Relaxed);
                    outcome = Err(e);
                    return;
                }
                tracing::info!(mcq = %trace.mcq_id, done = expected + 1, total = pending.len(), "trace written");
                traces.push(trace);
                expected += 1;
            }
        }
    });

    outcome.map(|()| DatasetRun { traces, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        HashEmbedding, HeuristicEvaluator, HeuristicGenerator, ScriptEntry, ScriptKind, ScriptedMock,
    };
    use crate::prompts::{count_feedback_blocks, CLOSING_REQUEST};

    fn record(index: usize, rating: f64, normalized_avg: Option<f64>) -> IterationRecord {
        IterationRecord {
            index,
            prompt: String::new(),
            generated_explanation: format!("E{index}"),
            rating,
            bleu: normalized_avg.map(|_| 0.0),
            embed_f1: normalized_avg.map(|_| 0.0),
            normalized_avg,
        }
    }

    fn mcq(id: &str) -> Mcq {
        Mcq::new(
            id,
            "Which molecule stores energy?",
            "ATP",
            vec!["DNA".into(), "RNA".into()],
        )
        .unwrap()
        .with_explanation("ATP stores chemical energy in its phosphate bonds for the cell to use")
    }

    fn scripted(k: usize, ratings: &[&str]) -> ScriptedMock {
        let mut entries = Vec::new();
        for i in 1..=k {
            entries.push(ScriptEntry {
                mcq_id: "*".into(),
                iteration: Some(i),
                kind: ScriptKind::Generator,
                text: format!("E{i}"),
            });
            entries.push(ScriptEntry {
                mcq_id: "*".into(),
                iteration: Some(i),
                kind: ScriptKind::Evaluator,
                text: ratings[(i - 1) % ratings.len()].into(),
            });
        }
        ScriptedMock::new("script", entries)
    }

    fn backends(mock: ScriptedMock, embed: bool) -> Backends {
        let mock = Arc::new(mock);
        Backends {
            generator: mock.clone(),
            evaluator: mock,
            embedder: embed.then(|| Arc::new(HashEmbedding::new("hash", 32, 0)) as Arc<dyn EmbeddingBackend>),
        }
    }

    #[test]
    fn select_best_examples() {
        let recs = [
            record(1, 3.0, Some(0.5)),
            record(2, 3.0, Some(0.6)),
            record(3, 3.0, Some(0.55)),
        ];
        assert_eq!(select_best(&recs), Ok(2));
        let ties = [
            record(1, 3.0, Some(0.4)),
            record(2, 3.0, Some(0.4)),
            record(3, 3.0, Some(0.4)),
        ];
        assert_eq!(select_best(&ties), Ok(1));
        assert_eq!(select_best(&[record(1, 1.0, None)]), Ok(1));
        assert_eq!(select_best(&[]), Err(EmptyTrace));
    }

    #[test]
    fn select_best_falls_back_to_rating() {
        let recs = [record(1, 3.0, None), record(2, 4.5, None), record(3, 4.5, None)];
        assert_eq!(select_best(&recs), Ok(2));
    }

    #[test]
    fn scripted_ratings_propagate() {
        let config = LoopConfig {
            iterations: 3,
            ..LoopConfig::default()
        };
        let trace = run_question(
            &mcq("q1"),
            &config,
            &backends(scripted(3, &["3.0", "3.5", "3.2"]), true),
        );
        assert!(trace.failure.is_none());
        let ratings: Vec<f64> = trace.records.iter().map(|r| r.rating).collect();
        assert_eq!(ratings, [3.0, 3.5, 3.2]);
        let explanations: Vec<&str> = trace.records.iter().map(|r| r.generated_explanation.as_str()).collect();
        assert_eq!(explanations, ["E1", "E2", "E3"]);
        assert!(trace.records.iter().all(|r| r.normalized_avg.is_some()));
        assert!(trace.selected_index.is_some());
    }

    #[test]
    fn single_iteration_never_refines() {
        let config = LoopConfig {
            iterations: 1,
            ..LoopConfig::default()
        };
        let trace = run_question(&mcq("q1"), &config, &backends(scripted(1, &["3.0"]), false));
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.selected_index, Some(1));
        assert!(!trace.records[0].prompt.contains(CLOSING_REQUEST));
    }

    #[test]
    fn all_history_prompts_accumulate() {
        let config = LoopConfig {
            iterations: 3,
            history_mode: HistoryMode::AllHistory,
            ..LoopConfig::default()
        };
        let trace = run_question(
            &mcq("q1"),
            &config,
            &backends(scripted(3, &["3.0", "3.5", "3.2"]), false),
        );
        let third = &trace.records[2].prompt;
        assert!(third.contains("3.00 and E1."));
        assert!(third.contains("3.50 and E2."));
        assert_eq!(count_feedback_blocks(third), 2);
    }

    #[test]
    fn recent_only_prompt_embeds_previous_turn() {
        let config = LoopConfig {
            iterations: 3,
            ..LoopConfig::default()
        };
        let trace = run_question(
            &mcq("q1"),
            &config,
            &backends(scripted(3, &["3.0", "3.5", "3.2"]), false),
        );
        let third = &trace.records[2].prompt;
        assert!(third.contains("3.50 and E2."));
        assert!(!third.contains("E1"));
        assert_eq!(count_feedback_blocks(third), 1);
    }

    #[test]
    fn evaluation_failure_truncates_run() {
        let config = LoopConfig {
            iterations: 3,
            evaluation_retries: 1,
            ..LoopConfig::default()
        };
        let trace = run_question(&mcq("q1"), &config, &backends(scripted(3, &["3.0", "nope"]), false));
        assert_eq!(trace.records.len(), 1);
        let failure = trace.failure.unwrap();
        assert_eq!(failure.iteration, 2);
        assert_eq!(failure.stage, FailureStage::Evaluation);
    }

    #[test]
    fn heuristic_run_completes() {
        let backends = Backends {
            generator: Arc::new(HeuristicGenerator::new("g", 1)),
            evaluator: Arc::new(HeuristicEvaluator::new("h", 20.0)),
            embedder: Some(Arc::new(HashEmbedding::new("e", 16, 0))),
        };
        let trace = run_question(&mcq("q1"), &LoopConfig::default(), &backends);
        assert_eq!(trace.records.len(), LoopConfig::default().iterations);
        assert!(trace.failure.is_none());
    }

    #[test]
    fn memory_sink_resume_skips_known_ids() {
        let mcqs: Vec<Mcq> = (0..5).map(|i| mcq(&format!("q{i}"))).collect();
        let mut sink = MemorySink::with_ids(["q1".to_string(), "q3".to_string()]);
        let config = LoopConfig {
            iterations: 2,
            concurrency: 3,
            ..LoopConfig::default()
        };
        let run = run_dataset(&mcqs, &config, &backends(scripted(2, &["3.0"]), false), &mut sink).unwrap();
        assert_eq!(run.skipped, 2);
        let ids: Vec<&str> = run.traces.iter().map(|t| t.mcq_id.as_str()).collect();
        assert_eq!(ids, ["q0", "q2", "q4"]);
        assert_eq!(sink.lines.len(), 3);
    }
}
