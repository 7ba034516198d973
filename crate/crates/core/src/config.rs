//! Pipeline configuration: one TOML file with a section per stage, scalar
//! overrides from `GISTILL_<SECTION>_<KEY>` environment variables, and
//! validation that reports the offending field by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::downstream::{HarnessConfig, HighlightFormat};
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::model::DetectorConfig;
use crate::teacher::TeacherConfig;

pub const ENV_PREFIX: &str = "GISTILL_";

const SECTIONS: [&str; 8] = ["paths", "teacher", "distill", "fusion", "model", "extract", "fuse_eval", "highlight"];

/// Relative paths resolve against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub traces: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            traces: "work/traces".into(),
            checkpoints: "work/checkpoints".into(),
            reports: "work/reports".into(),
        }
    }
}

/// Source of attention traces: the scripted oracle, or a trained toy
/// teacher checkpoint (a file or a directory of ensemble members).
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherChoice {
    Oracle,
    Checkpoint(PathBuf),
}

impl Serialize for TeacherChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TeacherChoice::Oracle => s.serialize_str("oracle"),
            TeacherChoice::Checkpoint(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for TeacherChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

impl std::str::FromStr for TeacherChoice {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "oracle" { TeacherChoice::Oracle } else { TeacherChoice::Checkpoint(s.into()) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub teacher: TeacherChoice,
    /// Logit of salient positions in the oracle teacher's attention; the
    /// rest sit at 0.
    pub sharpness: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { teacher: TeacherChoice::Oracle, sharpness: 5.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Needle,
    #[default]
    Select,
    Span,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(Self::Needle),
            "select" => Ok(Self::Select),
            "span" => Ok(Self::Span),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceKind {
    #[default]
    Detector,
    Oracle,
    Uniform,
}

impl std::str::FromStr for ImportanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(Self::Detector),
            "oracle" => Ok(Self::Oracle),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown importance source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseEvalConfig {
    pub task: TaskKind,
    pub importance: ImportanceKind,
    pub harness: HarnessConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighlightConfig {
    pub format: HighlightFormat,
    /// How many leading documents of the dataset to render.
    pub docs: usize,
}

impl Default for HighlightConfig {
    fn default() -> Self {
        Self { format: HighlightFormat::Html, docs: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream. Section-level seeds are derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub fusion: FusionSpec,
    pub model: DetectorConfig,
    pub extract: ExtractConfig,
    pub fuse_eval: FuseEvalConfig,
    pub highlight: HighlightConfig,
    /// Directory that relative paths resolve against. Not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    /// Parses and validates `text`. `env` supplies override variables;
    /// `base_dir` anchors relative paths.
    pub fn from_toml_str<I, K, V>(text: &str, base_dir: &Path, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| classify(e.message()))?;
        for section in ["teacher", "distill"] {
            if table.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::Config(format!("{section}.seed is derived from the top-level seed; set that instead")));
            }
        }
        for (k, v) in env {
            apply_override(&mut table, k.as_ref(), v.as_ref())?;
        }
        let mut cfg: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| classify(e.message()))?;
        cfg.teacher.seed = cfg.seed;
        cfg.distill.seed = cfg.seed;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.distill.validate()?;
        self.fusion.validate()?;
        self.model.validate()?;
        if !(self.extract.sharpness >= 0.0 && self.extract.sharpness.is_finite()) {
            return Err(Error::OutOfRange("sharpness".into()));
        }
        let h = &self.fuse_eval.harness;
        if h.embed_dim == 0 || h.hidden == 0 || h.batch_size == 0 {
            return Err(Error::OutOfRange("harness".into()));
        }
        if !(h.lr >= 0.0 && h.lr.is_finite()) {
            return Err(Error::OutOfRange("harness.lr".into()));
        }
        if let Some(data) = &self.paths.data {
            let p = self.resolve(data);
            if !p.is_file() {
                return Err(Error::MissingPath { field: "paths.data".into(), path: p });
            }
        }
        if let TeacherChoice::Checkpoint(c) = &self.extract.teacher {
            let p = self.resolve(c);
            if !p.exists() {
                return Err(Error::MissingPath { field: "extract.teacher".into(), path: p });
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        self.paths
            .data
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Config("paths.data is required".into()))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.resolve(&self.paths.traces)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoints)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.paths.reports)
    }
}

/// Reads, overrides from the process environment, and validates a config file.
pub fn validate_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingPath { field: "config".into(), path: path.to_path_buf() })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    PipelineConfig::from_toml_str(&text, &base, std::env::vars())
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn classify(msg: &str) -> Error {
    if msg.contains("unknown field") {
        Error::UnknownKey(backticked(msg).unwrap_or_else(|| msg.to_string()))
    } else if msg.contains("duplicate key") {
        Error::DuplicateKey(backticked(msg).unwrap_or_else(|| msg.to_string()))
    } else {
        Error::Config(msg.trim().to_string())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v") {
            Some(v @ (toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_) | toml::Value::String(_))) => v,
            _ => toml::Value::String(raw.to_string()),
        },
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<()> {
    let Some(rest) = var.strip_prefix(ENV_PREFIX) else {
        return Ok(());
    };
    let name = rest.to_ascii_lowercase();
    // logging is configured by the front end, not the pipeline
    if name == "log" {
        return Ok(());
    }
    if name == "seed" {
        table.insert(name, parse_scalar(raw));
        return Ok(());
    }
    let section = SECTIONS
        .iter()
        .filter(|s| name.starts_with(&format!("{s}_")))
        .max_by_key(|s| s.len())
        .ok_or_else(|| Error::UnknownKey(var.to_string()))?;
    let key = &name[section.len() + 1..];
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    let toml::Value::Table(t) = entry else {
        return Err(Error::Config(format!("{section} is not a section")));
    };
    t.insert(key.to_string(), parse_scalar(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_ENV: [(&str, &str); 0] = [];

    fn parse(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::from_toml_str(text, Path::new("."), NO_ENV)
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse("seed = 3\n").unwrap();
        assert_eq!(cfg.fusion.lambda_repr, 0.5);
        assert_eq!(cfg.fusion.lambda_score, 0.2);
        assert_eq!(cfg.distill.lr, 4e-4);
        assert_eq!(cfg.teacher.lr, 4e-4);
        assert_eq!(cfg.distill.seed, 3);
        assert_eq!(cfg.teacher.seed, 3);
        assert_eq!(parse("").unwrap().seed, 0);
    }

    #[test]
    fn out_of_range_names_the_field() {
        let err = parse("[fusion]\nlambda_repr = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::OutOfRange(ref f) if f == "lambda_repr"), "{err:?}");
        let err = parse("[distill]\ndropout = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::OutOfRange(ref f) if f == "dropout"), "{err:?}");
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let err = parse("[distill]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "learning_rate"), "{err:?}");
        let err = parse("[fusionn]\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "fusionn"), "{err:?}");
        let err = parse("[distill]\nlr = 0.1\nlr = 0.2\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(ref k) if k == "lr"), "{err:?}");
    }

    #[test]
    fn section_seeds_are_rejected() {
        assert!(matches!(parse("[distill]\nseed = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_data_path() {
        let err = parse("[paths]\ndata = \"does/not/exist.jsonl\"\n").unwrap_err();
        assert!(matches!(err, Error::MissingPath { ref field, .. } if field == "paths.data"), "{err:?}");
    }

    #[test]
    fn environment_overrides_scalars() {
        let env = [
            ("GISTILL_FUSION_LAMBDA_SCORE", "0.3"),
            ("GISTILL_FUSE_EVAL_TASK", "needle"),
            ("GISTILL_SEED", "9"),
            ("GISTILL_LOG", "debug"),
            ("PATH", "/bin"),
        ];
        let cfg = PipelineConfig::from_toml_str("[fusion]\nlambda_score = 0.1\n", Path::new("."), env).unwrap();
        assert_eq!(cfg.fusion.lambda_score, 0.3);
        assert_eq!(cfg.fuse_eval.task, TaskKind::Needle);
        assert_eq!(cfg.seed, 9);
        let err = PipelineConfig::from_toml_str("", Path::new("."), [("GISTILL_NOPE_X", "1")]).unwrap_err();
        assert!(matches!(err, Error::UnknownKey(_)));
        let err = PipelineConfig::from_toml_str("", Path::new("."), [("GISTILL_FUSION_LAMBDA_REPR", "2")]).unwrap_err();
        assert!(matches!(err, Error::OutOfRange(ref f) if f == "lambda_repr"));
    }

    #[test]
    fn teacher_choice_parses() {
        let cfg = parse("[extract]\nteacher = \"oracle\"\n").unwrap();
        assert_eq!(cfg.extract.teacher, TeacherChoice::Oracle);
        let err = parse("[extract]\nteacher = \"missing.ckpt\"\n").unwrap_err();
        assert!(matches!(err, Error::MissingPath { ref field, .. } if field == "extract.teacher"));
    }
}
