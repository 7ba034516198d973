use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub id: String,
    pub text: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummarizationRecord {
    pub id: String,
    pub article: String,
    pub summary: String,
}

/// `answer_spans` are inclusive token index pairs into the tokenized passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub text: String,
    pub has_answer: bool,
    #[serde(default)]
    pub answer_spans: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub passages: Vec<Passage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Summarization(SummarizationRecord),
    Classification(ClassificationRecord),
    Qa(QaRecord),
}

impl Record {
    pub fn id(&self) -> &str {
        match self {
            Record::Summarization(r) => &r.id,
            Record::Classification(r) => &r.id,
            Record::Qa(r) => &r.id,
        }
    }

    /// Texts the gist detector scores, keyed by output id. QA records yield
    /// one entry per passage (`<id>#<k>`).
    pub fn source_texts(&self) -> Vec<(String, &str)> {
        match self {
            Record::Summarization(r) => vec![(r.id.clone(), r.article.as_str())],
            Record::Classification(r) => vec![(r.id.clone(), r.text.as_str())],
            Record::Qa(r) => r.passages.iter().enumerate().map(|(k, p)| (format!("{}#{k}", r.id), p.text.as_str())).collect(),
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Dataset { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
