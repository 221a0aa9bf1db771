mod common;

use std::sync::Arc;

use common::{load, scripted_backends};
use ilearner::backends::{BackendError, CallContext, Completion, TextBackend};
use ilearner::prompts::{count_feedback_blocks, FEEDBACK_LEAD};
use ilearner::refine::{run_dataset, run_question, select_best, JsonlTraceFile, MemorySink, SinkError, TraceSink};
use ilearner::types::{FailureStage, GenParams, HistoryMode, IterationRecord, LoopConfig, RunTrace};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(concurrency: usize) -> LoopConfig {
    LoopConfig {
        concurrency,
        ..LoopConfig::default()
    }
}

fn run_lines(concurrency: usize) -> Vec<String> {
    let mut sink = MemorySink::default();
    let run = run_dataset(
        &load("questions10.jsonl"),
        &config(concurrency),
        &scripted_backends(),
        &mut sink,
    )
    .unwrap();
    assert_eq!(run.traces.len(), 10);
    sink.lines
}

#[test]
fn worker_count_does_not_change_output() {
    let one = run_lines(1);
    assert_eq!(one, run_lines(4));
    assert_eq!(one, run_lines(10));
    let mut sorted = one.clone();
    sorted.sort();
    let mut four = run_lines(4);
    four.sort();
    assert_eq!(sorted, four);
}

#[test]
fn resume_skips_existing_ids() {
    let mcqs = load("questions10.jsonl");
    let mut sink = MemorySink::with_ids(mcqs.iter().take(6).map(|m| m.id.clone()));
    let run = run_dataset(&mcqs, &config(3), &scripted_backends(), &mut sink).unwrap();
    assert_eq!(run.skipped, 6);
    assert_eq!(run.traces.len(), 4);
    assert_eq!(sink.lines.len(), 4);
}

#[test]
fn resume_from_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    let mcqs = load("questions10.jsonl");
    {
        let mut sink = JsonlTraceFile::open(&path).unwrap();
        run_dataset(&mcqs[..6], &config(2), &scripted_backends(), &mut sink).unwrap();
    }
    // Simulate a crash mid-write.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(br#"{"schema_version":1,"mcq_id":"med-"#);
    std::fs::write(&path, &bytes).unwrap();

    let mut sink = JsonlTraceFile::open(&path).unwrap();
    assert_eq!(sink.len(), 6);
    let run = run_dataset(&mcqs, &config(2), &scripted_backends(), &mut sink).unwrap();
    assert_eq!((run.traces.len(), run.skipped), (4, 6));
    drop(sink);

    let mut sink = MemorySink::default();
    run_dataset(&mcqs, &config(1), &scripted_backends(), &mut sink).unwrap();
    let fresh: String = sink.lines.iter().map(|l| format!("{l}\n")).collect();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), fresh);
}

/// Delegates to another evaluator except for one question, where it never
/// produces a number.
struct Sulky {
    inner: Arc<dyn TextBackend>,
    victim: &'static str,
}

impl TextBackend for Sulky {
    fn id(&self) -> &str {
        "sulky"
    }

    fn complete(
        &self,
        prompt: &ilearner::prompts::PromptText,
        params: &GenParams,
        ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        if ctx.mcq_id == self.victim {
            return Ok(Completion {
                text: "I would rather not say.".into(),
                attempts: 1,
            });
        }
        self.inner.complete(prompt, params, ctx)
    }
}

#[test]
fn one_failing_question_does_not_stop_the_rest() {
    let mut backends = scripted_backends();
    backends.evaluator = Arc::new(Sulky {
        inner: backends.evaluator.clone(),
        victim: "bio-03",
    });
    let mut sink = MemorySink::default();
    let run = run_dataset(&load("questions10.jsonl"), &config(4), &backends, &mut sink).unwrap();
    assert_eq!(run.traces.len(), 10);
    assert_eq!(run.failed(), 1);
    let failed = run.traces.iter().find(|t| t.is_failed()).unwrap();
    assert_eq!(failed.mcq_id, "bio-03");
    let failure = failed.failure.as_ref().unwrap();
    assert_eq!((failure.iteration, failure.stage), (1, FailureStage::Evaluation));
    assert!(failed.records.is_empty());
    for t in run.traces.iter().filter(|t| !t.is_failed()) {
        assert_eq!(t.records.len(), 6);
    }
}

struct BrokenSink;

impl TraceSink for BrokenSink {
    fn contains(&self, _: &str) -> bool {
        false
    }

    fn append(&mut self, _: &RunTrace) -> Result<(), SinkError> {
        Err(SinkError::Write("disk full".into()))
    }
}

#[test]
fn sink_failure_aborts() {
    let err = run_dataset(
        &load("questions10.jsonl"),
        &config(4),
        &scripted_backends(),
        &mut BrokenSink,
    )
    .unwrap_err();
    assert!(err.to_string().contains("disk full"));
}

#[test]
fn stored_prompts_follow_history_mode() {
    let mcq = &load("questions10.jsonl")[0];
    let recent = run_question(mcq, &config(1), &scripted_backends());
    for pair in recent.records.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        assert_eq!(count_feedback_blocks(&cur.prompt), 1);
        let line = format!("{FEEDBACK_LEAD} {:.2} and {}.", prev.rating, prev.generated_explanation);
        assert!(cur.prompt.contains(&line));
    }

    let all = LoopConfig {
        history_mode: HistoryMode::AllHistory,
        ..config(1)
    };
    let trace = run_question(mcq, &all, &scripted_backends());
    assert_eq!(trace.records.len(), 6);
    for (k, rec) in trace.records.iter().enumerate() {
        assert_eq!(count_feedback_blocks(&rec.prompt), k);
        let mut from = 0;
        for earlier in &trace.records[..k] {
            let line = format!(
                "{FEEDBACK_LEAD} {:.2} and {}.",
                earlier.rating, earlier.generated_explanation
            );
            let at = rec.prompt[from..].find(&line).expect("history in order") + from;
            from = at + line.len();
        }
    }
}

fn brute_force(records: &[IterationRecord]) -> usize {
    let key = |r: &IterationRecord| {
        if records.iter().any(|r| r.normalized_avg.is_some()) {
            r.normalized_avg.unwrap_or(f64::NEG_INFINITY)
        } else {
            r.rating
        }
    };
    let mut best = 0;
    for i in 0..records.len() {
        if key(&records[i]) > key(&records[best]) {
            best = i;
        }
    }
    best + 1
}

fn synthetic(rng: &mut ChaCha8Rng) -> Vec<IterationRecord> {
    let k = rng.random_range(1..=8);
    // Coarse grid so ties are common.
    let levels = [0.2, 0.4, 0.5, 0.6, 0.8];
    (1..=k)
        .map(|index| IterationRecord {
            index,
            prompt: String::new(),
            generated_explanation: String::new(),
            rating: levels[rng.random_range(0..levels.len())] * 5.0,
            bleu: None,
            embed_f1: None,
            normalized_avg: Some(levels[rng.random_range(0..levels.len())]),
        })
        .collect()
}

#[test]
fn select_best_matches_brute_force_on_random_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ties = 0;
    for _ in 0..100 {
        let records = synthetic(&mut rng);
        let max = records.iter().filter_map(|r| r.normalized_avg).fold(f64::MIN, f64::max);
        if records.iter().filter(|r| r.normalized_avg == Some(max)).count() > 1 {
            ties += 1;
        }
        assert_eq!(select_best(&records).unwrap(), brute_force(&records));
    }
    assert!(ties > 10, "fixture should exercise ties, got {ties}");
}

proptest! {
    #[test]
    fn select_best_without_references_uses_rating(ratings in prop::collection::vec(0u8..=10, 1..10)) {
        let records: Vec<IterationRecord> = ratings
            .iter()
            .enumerate()
            .map(|(i, r)| IterationRecord {
                index: i + 1,
                prompt: String::new(),
                generated_explanation: String::new(),
                rating: f64::from(*r) / 2.0,
                bleu: None,
                embed_f1: None,
                normalized_avg: None,
            })
            .collect();
        prop_assert_eq!(select_best(&records).unwrap(), brute_force(&records));
    }
}
