use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{Label, Sentence};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `text<TAB>label` per line.
    Tsv,
    /// `{"text": ..., "label": ...}` per line.
    Jsonl,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(DatasetFormat::Tsv),
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(invalid(format!("unknown dataset format `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::Tsv => "tsv",
            DatasetFormat::Jsonl => "jsonl",
        }
    }

    /// Guesses from the file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DatasetFormat::Jsonl,
            _ => DatasetFormat::Tsv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedDataset {
    pub sentences: Vec<Sentence>,
    pub rejected: Vec<Rejection>,
}

#[derive(Deserialize)]
struct JsonRecord {
    text: Option<String>,
    label: Option<serde_json::Value>,
}

/// Loads a labeled corpus in file order. Empty-text records are skipped and
/// reported in `rejected`; unreadable labels abort with the line number.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadedDataset> {
    let content = fs::read_to_string(path)?;
    let record_err = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut sentences = Vec::new();
    let mut rejected = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            rejected.push(Rejection {
                line: line_no,
                reason: "empty line".into(),
            });
            continue;
        }
        let (text, label) = match format {
            DatasetFormat::Tsv => {
                let (text, label) = raw
                    .rsplit_once('\t')
                    .ok_or_else(|| record_err(line_no, "missing TAB-separated label".into()))?;
                let label = Label::parse(label)
                    .ok_or_else(|| record_err(line_no, format!("bad label `{label}`")))?;
                (text.to_string(), label)
            }
            DatasetFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(raw)
                    .map_err(|e| record_err(line_no, format!("invalid JSON: {e}")))?;
                let text = rec
                    .text
                    .ok_or_else(|| record_err(line_no, "missing `text` field".into()))?;
                let label = match rec.label {
                    Some(serde_json::Value::Number(n)) => {
                        n.as_u64().and_then(|v| Label::from_index(v as usize))
                    }
                    Some(serde_json::Value::String(s)) => Label::parse(&s),
                    _ => None,
                }
                .ok_or_else(|| record_err(line_no, "missing or bad `label` field".into()))?;
                (text, label)
            }
        };
        let sentence = Sentence::new(&text, label);
        if sentence.tokens.is_empty() {
            rejected.push(Rejection {
                line: line_no,
                reason: "empty text".into(),
            });
            continue;
        }
        sentences.push(sentence);
    }
    Ok(LoadedDataset {
        sentences,
        rejected,
    })
}
