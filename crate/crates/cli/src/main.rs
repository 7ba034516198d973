use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gistill_core::config::{validate_config, ImportanceKind, PipelineConfig, TaskKind};
use gistill_core::corpus_io::{read_jsonl, write_jsonl, Record, SummarizationRecord};
use gistill_core::distill::DistillConfig;
use gistill_core::downstream::{HarnessConfig, HighlightFormat, ImportanceSource};
use gistill_core::exec::Execution;
use gistill_core::fusion::{FusionSpec, ScoreCoefficient};
use gistill_core::model::{DetectorConfig, GistDetector};
use gistill_core::pipeline::{self, Stage, TraceTeacher};
use gistill_core::synthetic::GistCorpus;
use gistill_core::teacher::{train_toy_teacher, TeacherConfig, TraceMode};
use gistill_core::Error;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "gistill", version, about = "Distill token importance from summarization attention and fuse it into downstream models")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic summarization corpus as JSONL.
    Synth(SynthArgs),
    /// Train a toy summarization teacher (or an ensemble of them).
    TrainTeacher(TrainTeacherArgs),
    /// Extract cross-attention traces from a teacher.
    Extract(ExtractArgs),
    /// Train a gist detector on extracted traces.
    Distill(DistillArgs),
    /// Write per-token importance for every document.
    Infer(InferArgs),
    /// Paired unfused/fused evaluation on a synthetic downstream task.
    FuseEval(FuseEvalArgs),
    /// Render a text with importance shading.
    Highlight(HighlightArgs),
    /// Run pipeline stages as configured.
    Pipeline(PipelineArgs),
    /// Check a config file and print it with defaults filled in.
    ValidateConfig(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pipeline config whose [teacher] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory; members are written as member-<j>.ckpt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TeacherForced,
    Greedy,
}

#[derive(Args)]
struct ExtractArgs {
    /// `oracle`, a teacher checkpoint, or a directory of ensemble members.
    #[arg(long)]
    teacher: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Decoder layer to read attention from (default: the last).
    #[arg(long)]
    layer: Option<usize>,
    /// `mean` or a head index.
    #[arg(long, default_value = "mean")]
    heads: String,
    /// Number of ensemble members to use.
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    sharpness: f64,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Either a flat file of distillation fields or a pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the training report; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoefArg {
    Lambda,
    LambdaPrime,
}

#[derive(Args)]
struct FuseEvalArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// Gist detector checkpoint; required for detector importance.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `detector`, `oracle` or `uniform`. Defaults to detector when a
    /// checkpoint is given, else oracle.
    #[arg(long, value_parser = parse_importance)]
    importance: Option<ImportanceKind>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    lambda_prime: f64,
    /// Coefficient on the importance term of score fusion.
    #[arg(long, value_enum, default_value = "lambda-prime")]
    eq4_coef: CoefArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pipeline config whose [fuse_eval.harness] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct HighlightArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long, default_value = "html", value_parser = parse_format)]
    format: HighlightFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of extract,distill,infer,fuse-eval,highlight.
    #[arg(long, value_delimiter = ',', value_parser = parse_stage)]
    stages: Option<Vec<Stage>>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_importance(s: &str) -> Result<ImportanceKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<HighlightFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn pipeline_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => validate_config(p)?,
        None => PipelineConfig::from_toml_str("", Path::new("."), std::env::vars())?,
    })
}

/// Distillation settings from either a flat file of fields or a pipeline
/// config with [distill] and [model] sections.
fn distill_settings(path: Option<&Path>) -> anyhow::Result<(DistillConfig, DetectorConfig)> {
    let Some(path) = path else {
        return Ok((DistillConfig::default(), DetectorConfig::default()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if table.values().any(toml::Value::is_table) {
        let cfg = validate_config(path)?;
        return Ok((cfg.distill, cfg.model));
    }
    let flat: DistillConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        let msg = e.message();
        if msg.contains("unknown field") {
            Error::UnknownKey(msg.split('`').nth(1).unwrap_or(msg).to_string())
        } else {
            Error::Config(msg.to_string())
        }
    })?;
    flat.validate()?;
    Ok((flat, DetectorConfig::default()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Synth(a) => {
            let records = GistCorpus { seed: a.seed, n_docs: a.docs, ..Default::default() }.records()?;
            write_jsonl(&a.out, &records)?;
            tracing::info!(docs = records.len(), out = %a.out.display(), "corpus written");
        }
        Command::TrainTeacher(a) => {
            let cfg = pipeline_config(a.config.as_deref())?;
            let mut teacher = cfg.teacher.clone();
            if let Some(k) = a.ensemble {
                teacher.ensemble_size = k;
            }
            if let Some(e) = a.epochs {
                teacher.epochs = e;
            }
            let records: Vec<SummarizationRecord> = read_jsonl(&a.data)?;
            let vocab = pipeline::teacher_vocabulary(
                &records.iter().cloned().map(Record::Summarization).collect::<Vec<_>>(),
            );
            let trained = train_toy_teacher(&records, &vocab, &teacher, exec)?;
            fs::create_dir_all(&a.out)?;
            for (j, m) in trained.members.iter().enumerate() {
                m.save(a.out.join(format!("member-{j}.ckpt")))?;
            }
            for (j, curve) in trained.step_losses.iter().enumerate() {
                tracing::info!(member = j, first_loss = curve.first().copied(), last_loss = curve.last().copied(), "teacher trained");
            }
        }
        Command::Extract(a) => {
            let records: Vec<Record> = read_jsonl(&a.data)?;
            let head = match a.heads.as_str() {
                "mean" => None,
                h => Some(h.parse::<usize>().with_context(|| format!("--heads expects `mean` or an index, got {h:?}"))?),
            };
            let teacher = if a.teacher == "oracle" {
                if a.ensemble.is_some_and(|k| k != 1) {
                    bail!(Error::InvalidArgument("the oracle teacher is a single member".into()));
                }
                TraceTeacher::Oracle { sharpness: a.sharpness }
            } else {
                let members = pipeline::load_teachers(Path::new(&a.teacher), a.ensemble)?;
                let members = members
                    .into_iter()
                    .map(|m| {
                        let source = pipeline::attention_source(a.layer, head, m.config().decoder_layers);
                        let mode = match a.mode {
                            Some(ModeArg::Greedy) => TraceMode::Greedy,
                            Some(ModeArg::TeacherForced) => TraceMode::TeacherForced,
                            None => m.config().trace_mode,
                        };
                        m.with_trace_settings(source, mode)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                TraceTeacher::Toy(members)
            };
            let index = pipeline::extract_traces(&records, &teacher, &a.out, exec)?;
            tracing::info!(docs = index.docs.len(), "extract finished");
        }
        Command::Distill(a) => {
            let (mut distill, model) = distill_settings(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                distill.seed = seed;
            }
            let records: Vec<Record> = read_jsonl(&a.data)?;
            let reduction = TeacherConfig::default().reduction;
            let (vocab, examples) = pipeline::load_distill_examples(&a.traces, &records, reduction, exec)?;
            let (detector, report) = pipeline::distill_detector(&vocab, &examples, &model, &distill, exec)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            detector.save(&a.out)?;
            write_json(&report, a.report.as_deref())?;
        }
        Command::Infer(a) => {
            let model = load_detector(&a.ckpt)?;
            let records: Vec<Record> = read_jsonl(&a.data)?;
            let dists = pipeline::infer_importance(&model, &records, exec)?;
            write_jsonl(&a.out, &dists)?;
            tracing::info!(docs = dists.len(), out = %a.out.display(), "importance written");
        }
        Command::FuseEval(a) => {
            let harness: HarnessConfig = match a.config.as_deref() {
                Some(p) => validate_config(p)?.fuse_eval.harness,
                None => HarnessConfig::default(),
            };
            let score_coef = match a.eq4_coef {
                CoefArg::Lambda => ScoreCoefficient::Lambda,
                CoefArg::LambdaPrime => ScoreCoefficient::LambdaPrime,
            };
            let spec = FusionSpec { score_coef, ..FusionSpec::new(a.lambda, a.lambda_prime)? };
            spec.validate()?;
            let kind = a.importance.unwrap_or(if a.ckpt.is_some() { ImportanceKind::Detector } else { ImportanceKind::Oracle });
            let model = match (&kind, &a.ckpt) {
                (ImportanceKind::Detector, Some(p)) => Some(load_detector(p)?),
                (ImportanceKind::Detector, None) => bail!(Error::InvalidArgument("detector importance needs --ckpt".into())),
                _ => None,
            };
            let source = match model.as_ref() {
                Some(m) => ImportanceSource::Detector(m),
                None if kind == ImportanceKind::Uniform => ImportanceSource::Uniform,
                None => ImportanceSource::Oracle,
            };
            let report = pipeline::fuse_eval(a.task, source, &spec, &harness, a.seed, exec)?;
            tracing::info!(task = report.task, baseline = ?report.baseline, fused = ?report.fused, "fuse-eval finished");
            write_json(&report, a.report.as_deref())?;
        }
        Command::Highlight(a) => {
            let model = load_detector(&a.ckpt)?;
            let text = fs::read_to_string(&a.text).with_context(|| format!("reading {}", a.text.display()))?;
            let id = a.text.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let out = pipeline::highlight_text(&model, &id, &text, a.format)?;
            match a.out {
                Some(p) => fs::write(p, out)?,
                None => print!("{out}"),
            }
        }
        Command::Pipeline(a) => {
            let cfg = validate_config(&a.config)?;
            let stages = a.stages.unwrap_or_else(|| Stage::ALL.to_vec());
            let outcome = pipeline::run_pipeline(&cfg, &stages, exec)?;
            let ran: Vec<&str> = outcome.ran.iter().map(|s| s.name()).collect();
            let skipped: Vec<&str> = outcome.skipped.iter().map(|s| s.name()).collect();
            tracing::info!(?ran, ?skipped, manifest = %outcome.manifest.display(), "pipeline finished");
            let artifacts: Vec<String> = outcome.artifacts.iter().map(|p| p.display().to_string()).collect();
            write_json(
                &serde_json::json!({ "ran": ran, "skipped": skipped, "manifest": outcome.manifest, "artifacts": artifacts }),
                None,
            )?;
        }
        Command::ValidateConfig(a) => {
            let cfg = validate_config(&a.config)?;
            write_json(&cfg, None)?;
        }
    }
    Ok(())
}

fn load_detector(path: &Path) -> anyhow::Result<GistDetector> {
    if !path.is_file() {
        bail!(Error::MissingArtifact("checkpoint".into()));
    }
    Ok(GistDetector::load(path)?)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_env("GISTILL_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Error>().map(Error::exit_code).unwrap_or(1);
            tracing::error!(error = %format!("{e:#}"), exit_code = code, "command failed");
            ExitCode::from(code as u8)
        }
    }
}
