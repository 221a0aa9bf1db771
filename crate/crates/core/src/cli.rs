//! Command-line front end.
//!
//! Exit codes: 0 success, 1 data or validation error, 2 backend or transport
//! error, 3 configuration or usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backends::{embed_tokens, EmbeddingBackend, HashEmbedding};
use crate::config::ExperimentConfig;
use crate::error::ConfigError;
use crate::ingest::{
    dataset_stats, export_finetune_evaluation, export_finetune_generation, filter_for_evaluation,
    filter_for_generation, parse_dataset, write_dataset, ColumnMap, DatasetFormat, IngestError, TrainingMetadata,
};
use crate::metrics::{bleu, embedding_f1};
use crate::refine::{run_dataset, JsonlTraceFile};
use crate::report::{aggregate, evaluator_benchmark, render_histogram, render_table, AggregateMode, TableFormat};
use crate::types::{HistoryMode, Mcq, RunTrace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Data(String),
    Backend(String),
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Config(_) => EXIT_CONFIG,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Backend(m) | CliError::Config(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data_err(context: impl std::fmt::Display) -> impl FnOnce(io::Error) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "ilearner",
    version,
    about = "Iteratively generate, rate and refine MCQ explanations"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Generation,
    Evaluation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TableArg {
    Markdown,
    Csv,
}

impl From<TableArg> for TableFormat {
    fn from(t: TableArg) -> Self {
        match t {
            TableArg::Markdown => TableFormat::Markdown,
            TableArg::Csv => TableFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HistoryArg {
    RecentOnly,
    AllHistory,
}

impl From<HistoryArg> for HistoryMode {
    fn from(h: HistoryArg) -> Self {
        match h {
            HistoryArg::RecentOnly => HistoryMode::RecentOnly,
            HistoryArg::AllHistory => HistoryMode::AllHistory,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a raw dataset and write it as canonical JSON lines.
    Ingest {
        /// Raw dataset file.
        input: PathBuf,
        /// Input format.
        #[arg(long, value_enum, default_value = "jsonl")]
        format: FormatArg,
        /// TOML file mapping canonical fields to CSV column names.
        #[arg(long)]
        column_map: Option<PathBuf>,
        /// Canonical JSON-lines output.
        #[arg(short, long)]
        output: PathBuf,
        /// Exit with status 1 if any record is rejected.
        #[arg(long)]
        strict: bool,
    },
    /// Filter canonical datasets for a training task and export fine-tuning records.
    Prepare {
        /// One or more canonical datasets; they are merged after filtering.
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
        /// Which training set to build.
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Fine-tuning JSON-lines output.
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the filtered questions as a canonical dataset.
        #[arg(long)]
        filtered: Option<PathBuf>,
        /// Hyperparameter sidecar path (default: <output>.meta).
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Print dataset statistics before and after filtering.
        #[arg(long)]
        stats: bool,
    },
    /// Run the refinement loop over a dataset, appending traces to a file.
    Run {
        /// Canonical dataset.
        dataset: PathBuf,
        /// Experiment TOML file.
        #[arg(short, long)]
        config: PathBuf,
        /// Trace file; existing traces are kept and their questions skipped.
        #[arg(short, long)]
        output: PathBuf,
        /// Override: iterations per question.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override: history mode.
        #[arg(long, value_enum)]
        history_mode: Option<HistoryArg>,
        /// Override: worker count.
        #[arg(long)]
        concurrency: Option<usize>,
        /// Override: evaluation retries after an unreadable rating.
        #[arg(long)]
        retries: Option<u32>,
        /// Override: sampling temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Override: sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize trace files as results tables.
    Report {
        /// Trace files; each becomes one table row.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Row labels, in the same order as the trace files (default: file stem).
        #[arg(long)]
        label: Vec<String>,
        /// Output format.
        #[arg(long, value_enum, default_value = "markdown")]
        format: TableArg,
        /// Print the selected-iteration histogram instead of averages.
        #[arg(long)]
        histogram: bool,
        /// Describe the first iteration of every trace instead of the selected one.
        #[arg(long)]
        baseline: bool,
        /// Write to a file instead of standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score candidate texts against references (one text per line) as CSV.
    EvalMetrics {
        /// Candidate texts, one per line.
        #[arg(long)]
        candidates: PathBuf,
        /// Reference texts, one per line, aligned with the candidates.
        #[arg(long)]
        references: PathBuf,
        /// Experiment config whose [embedding] backend to use (default: hash mock).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dimension of the default hash embedding.
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        /// Seed of the default hash embedding.
        #[arg(long, default_value_t = 0)]
        embed_seed: u64,
        /// Write to a file instead of standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare evaluator ratings of student explanations with student ratings (MSE).
    Benchmark {
        /// Canonical dataset.
        dataset: PathBuf,
        /// Experiment TOML file; its evaluator is benchmarked.
        #[arg(short, long)]
        config: PathBuf,
        /// Output format.
        #[arg(long, value_enum, default_value = "markdown")]
        format: TableArg,
        /// Also write per-question residuals as JSON lines.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(data_err(path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(data_err(path.display()))
}

fn load_canonical(path: &Path) -> Result<Vec<Mcq>, CliError> {
    let parsed = parse_dataset(open(path)?, &DatasetFormat::Jsonl)?;
    if let Some(first) = parsed.errors.first() {
        return Err(CliError::Data(format!(
            "{}: {} invalid record(s), first at {first}",
            path.display(),
            parsed.errors.len()
        )));
    }
    Ok(parsed.mcqs)
}

fn load_traces(path: &Path) -> Result<Vec<RunTrace>, CliError> {
    let reader = BufReader::new(open(path)?);
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(data_err(path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        traces.push(trace);
    }
    Ok(traces)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    BufReader::new(open(path)?)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(data_err(path.display()))
}

fn emit(text: &str, output: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    match output {
        Some(path) => {
            let mut file = create(path)?;
            file.write_all(text.as_bytes())
                .and_then(|_| file.flush())
                .map_err(data_err(path.display()))
        }
        None => out.write_all(text.as_bytes()).map_err(data_err("stdout")),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Ingest {
            input,
            format,
            column_map,
            output,
            strict,
        } => {
            let format = match format {
                FormatArg::Jsonl => DatasetFormat::Jsonl,
                FormatArg::Csv => {
                    let map = match column_map {
                        Some(path) => {
                            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
                                path: path.clone(),
                                source,
                            })?;
                            toml::from_str::<ColumnMap>(&text).map_err(|source| ConfigError::Parse {
                                path: path.clone(),
                                source: Box::new(source),
                            })?
                        }
                        None => ColumnMap::default(),
                    };
                    DatasetFormat::Csv(map)
                }
            };
            let parsed = parse_dataset(open(&input)?, &format)?;
            for e in &parsed.errors {
                eprintln!("warning: {}: {e}", input.display());
            }
            write_dataset(&parsed.mcqs, create(&output)?)?;
            writeln!(
                out,
                "{} record(s) written, {} warning(s)",
                parsed.mcqs.len(),
                parsed.errors.len()
            )
            .map_err(data_err("stdout"))?;
            if strict && !parsed.errors.is_empty() {
                return Err(CliError::Data(format!(
                    "{} record(s) rejected (--strict)",
                    parsed.errors.len()
                )));
            }
            Ok(())
        }

        Command::Prepare {
            datasets,
            task,
            output,
            filtered,
            metadata,
            stats,
        } => {
            let mut kept = Vec::new();
            for path in &datasets {
                let mcqs = load_canonical(path)?;
                let selected = match task {
                    TaskArg::Generation => filter_for_generation(&mcqs),
                    TaskArg::Evaluation => filter_for_evaluation(&mcqs),
                };
                if stats {
                    writeln!(out, "== {} (input)", path.display()).map_err(data_err("stdout"))?;
                    match dataset_stats(&mcqs) {
                        Ok(s) => writeln!(out, "{s}"),
                        Err(_) => writeln!(out, "(empty)"),
                    }
                    .map_err(data_err("stdout"))?;
                }
                kept.extend(selected);
            }
            let mut ids = std::collections::HashSet::new();
            if let Some(dup) = kept.iter().find(|m| !ids.insert(m.id.as_str())) {
                return Err(CliError::Data(format!(
                    "question id `{}` appears in more than one dataset",
                    dup.id
                )));
            }
            if stats {
                writeln!(out, "== filtered").map_err(data_err("stdout"))?;
                match dataset_stats(&kept) {
                    Ok(s) => writeln!(out, "{s}"),
                    Err(_) => writeln!(out, "(empty)"),
                }
                .map_err(data_err("stdout"))?;
            }
            let metadata_path = metadata.unwrap_or_else(|| {
                let mut p = output.clone().into_os_string();
                p.push(".meta");
                PathBuf::from(p)
            });
            let n = match task {
                TaskArg::Generation => export_finetune_generation(&kept, create(&output)?, create(&metadata_path)?)?,
                TaskArg::Evaluation => {
                    let n = export_finetune_evaluation(&kept, create(&output)?)?;
                    TrainingMetadata::default()
                        .write_to(create(&metadata_path)?)
                        .map_err(data_err(metadata_path.display()))?;
                    n
                }
            };
            if let Some(path) = filtered {
                write_dataset(&kept, create(&path)?)?;
            }
            writeln!(out, "{n} record(s) exported").map_err(data_err("stdout"))?;
            Ok(())
        }

        Command::Run {
            dataset,
            config,
            output,
            iterations,
            history_mode,
            concurrency,
            retries,
            temperature,
            seed,
        } => {
            let mut experiment = ExperimentConfig::load(&config)?;
            if let Some(k) = iterations {
                experiment.iterations = k;
            }
            if let Some(mode) = history_mode {
                experiment.history_mode = mode.into();
            }
            if let Some(c) = concurrency {
                experiment.concurrency = c;
            }
            if let Some(r) = retries {
                experiment.evaluation_retries = r;
            }
            if let Some(t) = temperature {
                experiment.generation.temperature = t;
            }
            if let Some(s) = seed {
                experiment.generation.seed = Some(s);
            }
            experiment.validate()?;
            let loop_config = experiment.loop_config();
            let backends = experiment.build_backends()?;
            let mcqs = load_canonical(&dataset)?;
            let mut sink = JsonlTraceFile::open(&output).map_err(|e| CliError::Data(e.to_string()))?;
            let run =
                run_dataset(&mcqs, &loop_config, &backends, &mut sink).map_err(|e| CliError::Data(e.to_string()))?;
            let failed = run.failed();
            writeln!(
                out,
                "{} new trace(s), {failed} failed, {} skipped (resume)",
                run.traces.len(),
                run.skipped
            )
            .map_err(data_err("stdout"))?;
            for t in run.traces.iter().filter(|t| t.is_failed()) {
                if let Some(f) = &t.failure {
                    eprintln!(
                        "warning: {} failed at iteration {}: {}",
                        t.mcq_id, f.iteration, f.message
                    );
                }
            }
            if failed > 0 && failed == run.traces.len() {
                return Err(CliError::Backend("every question failed".into()));
            }
            Ok(())
        }

        Command::Report {
            traces,
            label,
            format,
            histogram,
            baseline,
            output,
        } => {
            if !label.is_empty() && label.len() != traces.len() {
                return Err(CliError::Config(format!(
                    "{} label(s) given for {} trace file(s)",
                    label.len(),
                    traces.len()
                )));
            }
            let mode = if baseline {
                AggregateMode::Baseline
            } else {
                AggregateMode::Selected
            };
            let mut reports = Vec::new();
            for (i, path) in traces.iter().enumerate() {
                let name = label.get(i).cloned().unwrap_or_else(|| {
                    path.file_stem()
                        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
                });
                let report = aggregate(name, &load_traces(path)?, mode)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                reports.push(report);
            }
            let text = if histogram {
                render_histogram(&reports, format.into())
            } else {
                render_table(&reports, format.into())
            };
            emit(&text, output.as_deref(), out)
        }

        Command::EvalMetrics {
            candidates,
            references,
            config,
            embed_dim,
            embed_seed,
            output,
        } => {
            let embedder: Box<dyn EmbeddingBackend> = match config {
                Some(path) => {
                    let experiment = ExperimentConfig::load(&path)?;
                    match experiment.build_embedder()? {
                        Some(e) => Box::new(ArcEmbedder(e)),
                        None => {
                            return Err(CliError::Config(format!(
                                "{} has no [embedding] section",
                                path.display()
                            )))
                        }
                    }
                }
                None => Box::new(HashEmbedding::new("hash", embed_dim.max(1), embed_seed)),
            };
            let cands = read_lines(&candidates)?;
            let refs = read_lines(&references)?;
            if cands.len() != refs.len() {
                return Err(CliError::Data(format!(
                    "{} candidate line(s) but {} reference line(s)",
                    cands.len(),
                    refs.len()
                )));
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| CliError::Data(e.to_string());
            w.write_record(["line", "bleu", "embed_precision", "embed_recall", "embed_f1"])
                .map_err(csv_err)?;
            for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
                let b = bleu(c, r);
                let scores = match (embed_tokens(embedder.as_ref(), c), embed_tokens(embedder.as_ref(), r)) {
                    (Ok(ce), Ok(re)) => {
                        let cv: Vec<Vec<f64>> = ce.into_iter().map(|t| t.vector).collect();
                        let rv: Vec<Vec<f64>> = re.into_iter().map(|t| t.vector).collect();
                        let s = embedding_f1(&cv, &rv).map_err(|e| CliError::Data(format!("line {}: {e}", i + 1)))?;
                        [s.precision.to_string(), s.recall.to_string(), s.f1.to_string()]
                    }
                    (Err(e), _) | (_, Err(e)) if e.is_transport() => return Err(CliError::Backend(e.to_string())),
                    _ => [String::new(), String::new(), String::new()],
                };
                let [p, rc, f] = scores;
                w.write_record([(i + 1).to_string(), b.to_string(), p, rc, f])
                    .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
            emit(&String::from_utf8_lossy(&bytes), output.as_deref(), out)
        }

        Command::Benchmark {
            dataset,
            config,
            format,
            residuals,
        } => {
            let experiment = ExperimentConfig::load(&config)?;
            let evaluator = experiment.build_evaluator()?;
            let mcqs = load_canonical(&dataset)?;
            let report = evaluator_benchmark(
                &mcqs,
                evaluator.as_ref(),
                &experiment.generation,
                experiment.evaluation_retries,
            )
            .map_err(|e| CliError::Backend(e.to_string()))?;
            emit(&report.render(format.into()), None, out)?;
            if !report.excluded.is_empty() {
                writeln!(out, "excluded: {}", report.excluded.len()).map_err(data_err("stdout"))?;
            }
            if let Some(path) = residuals {
                let mut file = create(&path)?;
                for r in &report.residuals {
                    serde_json::to_writer(&mut file, r).map_err(|e| CliError::Data(e.to_string()))?;
                    file.write_all(b"\n").map_err(data_err(path.display()))?;
                }
                file.flush().map_err(data_err(path.display()))?;
            }
            Ok(())
        }
    }
}

struct ArcEmbedder(std::sync::Arc<dyn EmbeddingBackend>);

impl EmbeddingBackend for ArcEmbedder {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, crate::backends::BackendError> {
        self.0.embed(tokens)
    }
}
