//! Line-delimited record formats. Field names match the JSON schemas under
//! `schemas/`; every record carries `schema_version`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::policy::vocab::TokenId;
use crate::tasks::{TaskInstance, Tier};

pub const SCHEMA_VERSION: u32 = 1;

/// One sampled response, as dumped by the trainer and read by `ces shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub schema_version: u32,
    pub step: u64,
    pub prompt_id: u64,
    pub response_index: usize,
    pub tokens: Vec<TokenId>,
    pub entropy_bits: Vec<f64>,
    pub old_log_prob: Vec<f64>,
    pub r_acc: u8,
    pub r_fmt: u8,
}

/// One token's shaped advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapedRecord {
    pub schema_version: u32,
    pub step: u64,
    pub prompt_id: u64,
    pub response_index: usize,
    pub position: usize,
    pub base_advantage: f64,
    pub shaped_advantage: f64,
    pub selected: bool,
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub step: u64,
    pub samples: u64,
    pub groups: usize,
    pub mean_length: f64,
    pub mean_entropy_bits: f64,
    pub mean_group_accuracy: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub selected_tokens: usize,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub schema_version: u32,
    pub id: u64,
    pub operands: Vec<u8>,
    pub truth: u8,
    pub tier: Tier,
    pub prompt: Vec<TokenId>,
}

impl QuestionRecord {
    pub fn from_instance(inst: &TaskInstance) -> Self {
        QuestionRecord {
            schema_version: SCHEMA_VERSION,
            id: inst.id,
            operands: inst.operands.clone(),
            truth: inst.truth,
            tier: inst.tier,
            prompt: inst.prompt.clone(),
        }
    }

    pub fn to_instance(&self) -> Option<TaskInstance> {
        let inst = TaskInstance {
            id: self.id,
            operands: self.operands.clone(),
            truth: self.truth,
            tier: self.tier,
            prompt: self.prompt.clone(),
        };
        inst.is_consistent().then_some(inst)
    }
}

pub fn check_version(version: u32) -> std::result::Result<(), String> {
    if version == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(format!("unsupported schema_version {version}, expected {SCHEMA_VERSION}"))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| CesError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| CesError::io(path, e))?;
    }
    w.flush().map_err(|e| CesError::io(path, e))
}

/// Parses every non-blank line; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`read_jsonl`], keeping each record's line number.
pub fn read_jsonl_numbered<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| CesError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CesError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CesError::Schema {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_questions(path: &Path, questions: &[TaskInstance]) -> Result<()> {
    write_jsonl(path, questions.iter().map(QuestionRecord::from_instance))
}

pub fn read_questions(path: &Path) -> Result<Vec<TaskInstance>> {
    let records: Vec<(usize, QuestionRecord)> = read_jsonl_numbered(path)?;
    records
        .iter()
        .map(|(line, r)| {
            check_version(r.schema_version)
                .and_then(|_| r.to_instance().ok_or(format!("inconsistent question {}", r.id)))
                .map_err(|message| CesError::Schema {
                    path: path.display().to_string(),
                    line: *line,
                    message,
                })
        })
        .collect()
}
