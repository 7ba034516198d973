//! The five pipeline stages (`extract`, `distill`, `infer`, `fuse-eval`,
//! `highlight`), their on-disk artifacts, and a manifest of input and
//! output hashes that lets unchanged stages be skipped on rerun.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ImportanceKind, PipelineConfig, TaskKind, TeacherChoice};
use crate::corpus_io::{read_jsonl, read_trace, split_tokens, tokenize, write_jsonl, write_trace, Record, Vocabulary};
use crate::distill::{self, DistillConfig, DistillExample, TrainReport};
use crate::downstream::{
    render_highlight, run_classification, run_passage_selection, run_span_scoring, HarnessConfig, HighlightFormat,
    ImportanceSource, MetricsReport, NeedleTask, PassageTask,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::FusionSpec;
use crate::model::{DetectorConfig, GistDetector, ImportanceDistribution};
use crate::teacher::{
    combine_ensemble, oracle_teacher_trace, salient_positions, soft_target_with, AttentionSource, Reduction, TeacherConfig,
    ToyTeacher, TraceMode,
};

pub const TRACE_INDEX: &str = "index.json";
pub const CHECKPOINT_FILE: &str = "gist.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Extract,
    Distill,
    Infer,
    FuseEval,
    Highlight,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Extract, Stage::Distill, Stage::Infer, Stage::FuseEval, Stage::Highlight];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Distill => "distill",
            Stage::Infer => "infer",
            Stage::FuseEval => "fuse-eval",
            Stage::Highlight => "highlight",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Written next to the trace files; lists the shared vocabulary and the
/// documents covered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceIndex {
    pub members: usize,
    pub vocab: Vocabulary,
    pub docs: Vec<String>,
}

/// File name for one ensemble member's trace of `doc_id`. Hashing keeps
/// arbitrary ids filesystem-safe.
pub fn trace_file_name(doc_id: &str, member: usize) -> String {
    format!("{}.m{member}.gtr", hex::encode(Sha256::digest(doc_id.as_bytes())))
}

pub enum TraceTeacher {
    Oracle { sharpness: f64 },
    Toy(Vec<ToyTeacher>),
}

impl TraceTeacher {
    pub fn members(&self) -> usize {
        match self {
            TraceTeacher::Oracle { .. } => 1,
            TraceTeacher::Toy(m) => m.len(),
        }
    }
}

/// Loads a toy teacher checkpoint, or every `member-*.ckpt` of a directory
/// in name order, keeping the first `ensemble` members when given.
pub fn load_teachers(path: &Path, ensemble: Option<usize>) -> Result<Vec<ToyTeacher>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("member-") && name.ends_with(".ckpt")
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let k = ensemble.unwrap_or(files.len());
    if k == 0 || files.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if k > files.len() {
        return Err(Error::InvalidArgument(format!("asked for {k} ensemble members, found {}", files.len())));
    }
    let members: Vec<ToyTeacher> = files[..k].iter().map(ToyTeacher::load).collect::<Result<_>>()?;
    if members.iter().any(|m| m.vocab() != members[0].vocab()) {
        return Err(Error::InvalidArgument("ensemble members use different vocabularies".into()));
    }
    Ok(members)
}

pub fn teacher_vocabulary(records: &[Record]) -> Vocabulary {
    let texts = records.iter().flat_map(|r| match r {
        Record::Summarization(s) => vec![s.article.as_str(), s.summary.as_str()],
        Record::Classification(c) => vec![c.text.as_str()],
        Record::Qa(q) => std::iter::once(q.question.as_str()).chain(q.passages.iter().map(|p| p.text.as_str())).collect(),
    });
    Vocabulary::build(texts, 1)
}

fn clear_traces(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".gtr") || name == TRACE_INDEX {
                fs::remove_file(&p)?;
            }
        }
    }
    Ok(())
}

/// Writes one trace per document and ensemble member into `out`, replacing
/// any traces already there.
pub fn extract_traces(records: &[Record], teacher: &TraceTeacher, out: &Path, exec: Execution) -> Result<TraceIndex> {
    let vocab = match teacher {
        TraceTeacher::Oracle { .. } => teacher_vocabulary(records),
        TraceTeacher::Toy(m) => m.first().ok_or(Error::EmptyEnsemble)?.vocab().clone(),
    };
    fs::create_dir_all(out)?;
    clear_traces(out)?;
    let mut jobs = Vec::new();
    for r in records {
        let summary = match r {
            Record::Summarization(s) => Some(s.summary.as_str()),
            _ => None,
        };
        for (id, text) in r.source_texts() {
            jobs.push((id, text, summary));
        }
    }
    let written = exec.map(&jobs, |(id, text, summary)| -> Result<String> {
        let doc = tokenize(id.clone(), text, &vocab)?;
        match teacher {
            TraceTeacher::Oracle { sharpness } => {
                let summary = summary.ok_or_else(|| {
                    Error::InvalidArgument(format!("the oracle teacher needs a summary; record {id:?} has none"))
                })?;
                let salient = salient_positions(&doc, &split_tokens(summary));
                let trace = oracle_teacher_trace(&doc, &salient, *sharpness)?;
                write_trace(&trace, out.join(trace_file_name(id, 0)))?;
            }
            TraceTeacher::Toy(members) => {
                for (j, m) in members.iter().enumerate() {
                    let trace = match summary {
                        Some(s) if m.config().trace_mode == TraceMode::TeacherForced => {
                            m.teacher_forced_trace(&doc, &tokenize(id.clone(), s, &vocab)?.ids)?
                        }
                        _ => m.greedy_decode(&doc)?.1,
                    };
                    write_trace(&trace, out.join(trace_file_name(id, j)))?;
                }
            }
        }
        Ok(id.clone())
    });
    let docs = written.into_iter().collect::<Result<Vec<_>>>()?;
    let index = TraceIndex { members: teacher.members(), vocab, docs };
    fs::write(out.join(TRACE_INDEX), serde_json::to_string_pretty(&index)? + "\n")?;
    tracing::info!(docs = index.docs.len(), members = index.members, out = %out.display(), "traces written");
    Ok(index)
}

pub fn read_trace_index(dir: &Path) -> Result<TraceIndex> {
    let path = dir.join(TRACE_INDEX);
    if !path.is_file() {
        return Err(Error::MissingArtifact("traces".into()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Pairs every source text of `records` with its soft target: each member's
/// trace is reduced, then members are averaged.
pub fn load_distill_examples(
    dir: &Path,
    records: &[Record],
    reduction: Reduction,
    exec: Execution,
) -> Result<(Vocabulary, Vec<DistillExample>)> {
    let index = read_trace_index(dir)?;
    let jobs: Vec<(String, &str)> = records.iter().flat_map(Record::source_texts).collect();
    let examples = exec.map(&jobs, |(id, text)| -> Result<DistillExample> {
        let doc = tokenize(id.clone(), text, &index.vocab)?;
        let mut targets = Vec::with_capacity(index.members);
        for j in 0..index.members {
            let path = dir.join(trace_file_name(id, j));
            if !path.is_file() {
                return Err(Error::MissingArtifact("traces".into()));
            }
            let trace = read_trace(&path)?;
            if trace.doc_id != *id {
                return Err(Error::InvalidArgument(format!("trace {} belongs to {:?}, not {id:?}", path.display(), trace.doc_id)));
            }
            if trace.n_positions() != doc.n_tokens() {
                return Err(Error::LengthMismatch { expected: doc.n_tokens(), found: trace.n_positions() });
            }
            targets.push(soft_target_with(&trace, reduction)?);
        }
        Ok(DistillExample { doc, target: combine_ensemble(&targets)? })
    });
    let examples = examples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((index.vocab, examples))
}

/// Initializes a detector over `vocab` from `seed` and trains it on `examples`.
pub fn distill_detector(
    vocab: &Vocabulary,
    examples: &[DistillExample],
    model: &DetectorConfig,
    config: &DistillConfig,
    exec: Execution,
) -> Result<(GistDetector, TrainReport)> {
    let student = GistDetector::init(vocab, model, config.seed, None)?;
    let trained = distill::train(student, examples, config, exec)?;
    Ok((trained.best, trained.report))
}

/// Importance distribution for every source text of `records`.
pub fn infer_importance(model: &GistDetector, records: &[Record], exec: Execution) -> Result<Vec<ImportanceDistribution>> {
    let mut docs = Vec::new();
    for r in records {
        for (id, text) in r.source_texts() {
            docs.push(tokenize(id, text, model.vocab())?);
        }
    }
    model.forward_batch(&docs, exec)
}

/// Runs one seeded paired (unfused vs fused) evaluation.
pub fn fuse_eval(
    task: TaskKind,
    importance: ImportanceSource,
    spec: &FusionSpec,
    harness: &HarnessConfig,
    seed: u64,
    exec: Execution,
) -> Result<MetricsReport> {
    match task {
        TaskKind::Needle => run_classification(&NeedleTask { seed, ..Default::default() }, importance, spec, harness, exec),
        TaskKind::Select => run_passage_selection(&PassageTask { seed, ..Default::default() }, importance, spec, harness, exec),
        TaskKind::Span => run_span_scoring(&PassageTask { seed, ..Default::default() }, importance, spec, harness, exec),
    }
}

/// Renders `text` with the detector's importance shading.
pub fn highlight_text(model: &GistDetector, doc_id: &str, text: &str, format: HighlightFormat) -> Result<String> {
    let doc = tokenize(doc_id, text, model.vocab())?;
    let p = model.forward(&doc)?.p;
    render_highlight(&doc.tokens, &p, format)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Hash over the names and contents of the trace files in `dir`.
pub fn trace_dir_sha256(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".gtr") || n == TRACE_INDEX)
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\t");
        h.update(file_sha256(&dir.join(&n))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn json_sha256<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub output: Artifact,
}

/// Hashes of every stage's inputs and output. Contains no timestamps, so it
/// is itself reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn get(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage.name())
    }

    fn put(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|s| Stage::from_str(&s.stage).ok());
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub manifest: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

struct Layout {
    traces: PathBuf,
    checkpoint: PathBuf,
    distill_report: PathBuf,
    importance: PathBuf,
    fuse_eval: PathBuf,
    highlight: PathBuf,
    manifest: PathBuf,
}

impl Layout {
    fn new(cfg: &PipelineConfig) -> Self {
        let reports = cfg.reports_dir();
        let ext = match cfg.highlight.format {
            HighlightFormat::Html => "html",
            HighlightFormat::Ansi => "ansi",
        };
        Self {
            traces: cfg.traces_dir(),
            checkpoint: cfg.checkpoints_dir().join(CHECKPOINT_FILE),
            distill_report: reports.join("distill_report.json"),
            importance: reports.join("importance.jsonl"),
            fuse_eval: reports.join("fuse_eval.json"),
            highlight: reports.join(format!("highlight.{ext}")),
            manifest: reports.join(MANIFEST_FILE),
        }
    }

    fn output(&self, stage: Stage) -> &Path {
        match stage {
            Stage::Extract => &self.traces,
            Stage::Distill => &self.checkpoint,
            Stage::Infer => &self.importance,
            Stage::FuseEval => &self.fuse_eval,
            Stage::Highlight => &self.highlight,
        }
    }
}

fn artifact_hash(stage: Stage, path: &Path) -> Result<Option<String>> {
    let present = if stage == Stage::Extract { path.join(TRACE_INDEX).is_file() } else { path.is_file() };
    if !present {
        return Ok(None);
    }
    Ok(Some(if stage == Stage::Extract { trace_dir_sha256(path)? } else { file_sha256(path)? }))
}

fn require(stage: Stage, layout: &Layout, name: &str) -> Result<String> {
    artifact_hash(stage, layout.output(stage))?.ok_or_else(|| Error::MissingArtifact(name.into()))
}

fn display_path(cfg: &PipelineConfig, p: &Path) -> String {
    p.strip_prefix(&cfg.base_dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

#[derive(Serialize)]
struct ExtractInputs<'a> {
    teacher: &'a TeacherConfig,
    choice: &'a TeacherChoice,
    sharpness: f64,
}

fn stage_inputs(stage: Stage, cfg: &PipelineConfig, layout: &Layout, data_sha: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    m.insert("seed".to_string(), cfg.seed.to_string());
    match stage {
        Stage::Extract => {
            m.insert("data".into(), data_sha.to_string());
            let sel = ExtractInputs { teacher: &cfg.teacher, choice: &cfg.extract.teacher, sharpness: cfg.extract.sharpness };
            m.insert("config".into(), json_sha256(&sel)?);
            if let TeacherChoice::Checkpoint(p) = &cfg.extract.teacher {
                let p = cfg.resolve(p);
                let h = if p.is_dir() { json_sha256(&dir_listing_hashes(&p)?)? } else { file_sha256(&p)? };
                m.insert("teacher".into(), h);
            }
        }
        Stage::Distill => {
            m.insert("data".into(), data_sha.to_string());
            m.insert("traces".into(), require(Stage::Extract, layout, "traces")?);
            m.insert("config".into(), json_sha256(&(&cfg.model, &cfg.distill, &cfg.teacher.reduction))?);
        }
        Stage::Infer => {
            m.insert("data".into(), data_sha.to_string());
            m.insert("checkpoint".into(), require(Stage::Distill, layout, "checkpoint")?);
        }
        Stage::FuseEval => {
            if cfg.fuse_eval.importance == ImportanceKind::Detector {
                m.insert("checkpoint".into(), require(Stage::Distill, layout, "checkpoint")?);
            }
            m.insert("config".into(), json_sha256(&(&cfg.fuse_eval, &cfg.fusion))?);
        }
        Stage::Highlight => {
            m.insert("data".into(), data_sha.to_string());
            m.insert("checkpoint".into(), require(Stage::Distill, layout, "checkpoint")?);
            m.insert("config".into(), json_sha256(&cfg.highlight)?);
        }
    }
    Ok(m)
}

fn dir_listing_hashes(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_file() {
            v.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), file_sha256(&p)?));
        }
    }
    v.sort();
    Ok(v)
}

fn write_parent(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, layout: &Layout, records: &[Record], exec: Execution) -> Result<()> {
    match stage {
        Stage::Extract => {
            let teacher = match &cfg.extract.teacher {
                TeacherChoice::Oracle => TraceTeacher::Oracle { sharpness: cfg.extract.sharpness },
                TeacherChoice::Checkpoint(p) => {
                    let members = load_teachers(&cfg.resolve(p), None)?
                        .into_iter()
                        .map(|m| m.with_trace_settings(cfg.teacher.attention_source, cfg.teacher.trace_mode))
                        .collect::<Result<_>>()?;
                    TraceTeacher::Toy(members)
                }
            };
            extract_traces(records, &teacher, &layout.traces, exec)?;
        }
        Stage::Distill => {
            let (vocab, examples) = load_distill_examples(&layout.traces, records, cfg.teacher.reduction, exec)?;
            let (model, report) = distill_detector(&vocab, &examples, &cfg.model, &cfg.distill, exec)?;
            tracing::info!(wall_clock_secs = report.wall_clock_secs, best_epoch = ?report.best_epoch, "distillation finished");
            if let Some(parent) = layout.checkpoint.parent() {
                fs::create_dir_all(parent)?;
            }
            model.save(&layout.checkpoint)?;
            // timing varies run to run; it goes to the log, not the report
            let mut value = serde_json::to_value(&report)?;
            if let Some(obj) = value.as_object_mut() {
                obj.remove("wall_clock_secs");
            }
            write_parent(&layout.distill_report, (serde_json::to_string_pretty(&value)? + "\n").as_bytes())?;
        }
        Stage::Infer => {
            let model = GistDetector::load(&layout.checkpoint)?;
            let dists = infer_importance(&model, records, exec)?;
            if let Some(parent) = layout.importance.parent() {
                fs::create_dir_all(parent)?;
            }
            write_jsonl(&layout.importance, &dists)?;
        }
        Stage::FuseEval => {
            let model = match cfg.fuse_eval.importance {
                ImportanceKind::Detector => Some(GistDetector::load(&layout.checkpoint)?),
                _ => None,
            };
            let source = match (&cfg.fuse_eval.importance, &model) {
                (ImportanceKind::Oracle, _) => ImportanceSource::Oracle,
                (ImportanceKind::Uniform, _) => ImportanceSource::Uniform,
                (ImportanceKind::Detector, Some(m)) => ImportanceSource::Detector(m),
                (ImportanceKind::Detector, None) => unreachable!("detector loaded above"),
            };
            let report = fuse_eval(cfg.fuse_eval.task, source, &cfg.fusion, &cfg.fuse_eval.harness, cfg.seed, exec)?;
            write_parent(&layout.fuse_eval, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        }
        Stage::Highlight => {
            let model = GistDetector::load(&layout.checkpoint)?;
            let mut out = String::new();
            for (id, text) in records.iter().flat_map(Record::source_texts).take(cfg.highlight.docs) {
                out.push_str(&highlight_text(&model, &id, text, cfg.highlight.format)?);
            }
            write_parent(&layout.highlight, out.as_bytes())?;
        }
    }
    Ok(())
}

/// Runs `stages` in pipeline order. A stage whose recorded inputs and
/// output hash still match is skipped.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &[Stage], exec: Execution) -> Result<PipelineOutcome> {
    let data = cfg.data_path()?;
    if !data.is_file() {
        return Err(Error::MissingPath { field: "paths.data".into(), path: data });
    }
    let data_sha = file_sha256(&data)?;
    let records: Vec<Record> = read_jsonl(&data)?;
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::load(&layout.manifest)?.filter(|m| m.seed == cfg.seed).unwrap_or_default();
    manifest.seed = cfg.seed;
    let mut order: Vec<Stage> = stages.to_vec();
    order.sort();
    order.dedup();
    let mut outcome = PipelineOutcome { ran: vec![], skipped: vec![], manifest: layout.manifest.clone(), artifacts: vec![] };
    for stage in order {
        let inputs = stage_inputs(stage, cfg, &layout, &data_sha)?;
        let out_path = layout.output(stage);
        let current = artifact_hash(stage, out_path)?;
        let up_to_date = manifest
            .get(stage)
            .is_some_and(|rec| rec.inputs == inputs && Some(&rec.output.sha256) == current.as_ref());
        if up_to_date {
            tracing::info!(stage = stage.name(), "up to date; skipped");
            outcome.skipped.push(stage);
        } else {
            tracing::info!(stage = stage.name(), "running");
            run_stage(stage, cfg, &layout, records.as_slice(), exec)?;
            let sha = artifact_hash(stage, out_path)?.ok_or_else(|| Error::MissingArtifact(stage.name().into()))?;
            manifest.put(StageRecord {
                stage: stage.name().into(),
                inputs,
                output: Artifact { path: display_path(cfg, out_path), sha256: sha },
            });
            write_parent(&layout.manifest, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
            outcome.ran.push(stage);
        }
        outcome.artifacts.push(out_path.to_path_buf());
    }
    write_parent(&layout.manifest, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(outcome)
}

/// Attention selection from CLI-style flags: `layer` picks a decoder layer
/// (default the last) and `head` a head index, `None` meaning the mean over
/// heads.
pub fn attention_source(layer: Option<usize>, head: Option<usize>, decoder_layers: usize) -> AttentionSource {
    match (layer, head) {
        (None, None) => AttentionSource::FinalLayerMeanHeads,
        (Some(layer), None) => AttentionSource::LayerMeanHeads { layer },
        (layer, Some(head)) => AttentionSource::LayerHead { layer: layer.unwrap_or(decoder_layers.saturating_sub(1)), head },
    }
}
