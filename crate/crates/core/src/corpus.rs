//! Trace datasets: JSONL ingestion, answer grading, seeded splits and
//! length filtering.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use futures::{stream, StreamExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::digest;
use crate::gateway::{Gateway, GatewayError, TemplateId};
use crate::model::{Label, TraceRecord};
use crate::responses::parse_verdict;

/// Length limit used for reinforcement-learning data.
pub const RL_MAX_CHARS: usize = 25_000;
/// Length limit used for rubric construction data.
pub const BUILD_MAX_CHARS: usize = 35_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{} malformed line(s); first: {}", .0.len(), .0[0])]
    Malformed(Vec<LineError>),
    #[error("duplicate record id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("mixed domains in one dataset: {0:?}")]
    MixedDomain(BTreeSet<String>),
    #[error("split ratio must be strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("max_chars must be positive")]
    InvalidThreshold,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub records: Vec<TraceRecord>,
    pub domain: String,
    pub provenance: String,
}

impl TraceDataset {
    /// Validates unique ids and a uniform domain tag.
    pub fn new(
        records: Vec<TraceRecord>,
        provenance: impl Into<String>,
    ) -> Result<TraceDataset, CorpusError> {
        let mut ids = BTreeSet::new();
        for (i, record) in records.iter().enumerate() {
            if !ids.insert(record.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: record.id.clone(),
                    line: i + 1,
                });
            }
        }
        let domains: BTreeSet<String> = records.iter().map(|r| r.domain.clone()).collect();
        if domains.len() > 1 {
            return Err(CorpusError::MixedDomain(domains));
        }
        Ok(TraceDataset {
            domain: domains.into_iter().next().unwrap_or_default(),
            records,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// Same domain and provenance, different records.
    fn derive(&self, records: Vec<TraceRecord>, note: &str) -> TraceDataset {
        TraceDataset {
            records,
            domain: self.domain.clone(),
            provenance: format!("{} | {note}", self.provenance),
        }
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for record in &self.records {
            serde_json::to_writer(&mut out, record).expect("records serialize");
            out.push(b'\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |e: std::io::Error| CorpusError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_jsonl()).map_err(io)
    }

    /// Digest over the records' ids, labels and texts.
    pub fn digest(&self) -> String {
        digest::sha256_hex(&self.to_jsonl())
    }
}

/// Parses JSONL text. Malformed lines fail the whole parse unless
/// `permissive`, in which case they are skipped and returned.
pub fn parse_jsonl(
    text: &str,
    provenance: &str,
    permissive: bool,
) -> Result<(TraceDataset, Vec<LineError>), CorpusError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(line) {
            Ok(record) if record.id.trim().is_empty() => errors.push(LineError {
                line: i + 1,
                message: "empty id".to_string(),
            }),
            Ok(record) => records.push(record),
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() && !permissive {
        return Err(CorpusError::Malformed(errors));
    }
    Ok((TraceDataset::new(records, provenance)?, errors))
}

pub fn ingest(path: &Path, permissive: bool) -> Result<(TraceDataset, Vec<LineError>), CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_jsonl(&text, &path.display().to_string(), permissive)
}

/// Result of grading one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grade {
    Graded(Label),
    /// No usable verdict; such records are excluded downstream.
    None,
}

const GRADE_FORMS: [(&str, Label); 2] = [("correct", Label::Correct), ("incorrect", Label::Incorrect)];

/// Asks the grader whether `final_answer` matches `solution`.
pub async fn grade_answer(
    gateway: &Gateway,
    question: &str,
    final_answer: &str,
    solution: &str,
) -> Result<Grade, GatewayError> {
    if [question, final_answer, solution].iter().any(|s| s.trim().is_empty()) {
        return Ok(Grade::None);
    }
    let mut feedback = String::new();
    for _ in 0..2 {
        let request = gateway
            .request(TemplateId::Grade)
            .var("question", question)
            .var("final_answer", final_answer)
            .var("solution", solution)
            .var("feedback", feedback.as_str());
        let reply = gateway.complete(request).await?;
        if let Some(label) = parse_verdict(&reply.text, &GRADE_FORMS) {
            return Ok(Grade::Graded(label));
        }
        feedback = "\nYour previous reply did not end with a verdict line. End with CORRECT or INCORRECT on its own line.\n".to_string();
    }
    Ok(Grade::None)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradeReport {
    pub graded: usize,
    pub correct: usize,
    pub incorrect: usize,
    /// Ids excluded for missing inputs or unparseable verdicts.
    pub ungraded: Vec<String>,
}

/// Grades every record concurrently; ungraded records are dropped.
pub async fn grade_dataset(
    gateway: &Gateway,
    dataset: &TraceDataset,
) -> Result<(TraceDataset, GradeReport), CorpusError> {
    let grades: Vec<Result<Grade, GatewayError>> = stream::iter(&dataset.records)
        .map(|record| async move {
            grade_answer(
                gateway,
                &record.question,
                record.final_answer.as_deref().unwrap_or(""),
                record.solution.as_deref().unwrap_or(""),
            )
            .await
        })
        .buffered(gateway.concurrency())
        .collect()
        .await;
    let mut report = GradeReport::default();
    let mut records = Vec::new();
    for (record, grade) in dataset.records.iter().zip(grades) {
        match grade? {
            Grade::Graded(label) => {
                report.graded += 1;
                match label {
                    Label::Correct => report.correct += 1,
                    Label::Incorrect => report.incorrect += 1,
                }
                records.push(TraceRecord {
                    label: Some(label),
                    ..record.clone()
                });
            }
            Grade::None => report.ungraded.push(record.id.clone()),
        }
    }
    Ok((dataset.derive(records, "graded"), report))
}

/// Number of training records for `n` records at `ratio`: `ceil(ratio * n)`.
pub fn train_size(n: usize, ratio: f64) -> usize {
    let exact = ratio * n as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Seeded shuffle, then the first `train_size` records form the training
/// set. Each side keeps the input order.
pub fn split(
    dataset: &TraceDataset,
    ratio: f64,
    seed: u64,
) -> Result<(TraceDataset, TraceDataset), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..train_size(n, ratio)] {
        in_train[i] = true;
    }
    let (train, validation): (Vec<_>, Vec<_>) = dataset
        .records
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    let strip = |v: Vec<(TraceRecord, bool)>| v.into_iter().map(|(r, _)| r).collect();
    Ok((
        dataset.derive(strip(train), &format!("split train ratio={ratio} seed={seed}")),
        dataset.derive(strip(validation), &format!("split validation ratio={ratio} seed={seed}")),
    ))
}

/// Keeps records whose question plus trace is shorter than `max_chars`
/// characters. Returns the kept dataset and the number dropped.
pub fn filter_by_length(
    dataset: &TraceDataset,
    max_chars: usize,
) -> Result<(TraceDataset, usize), CorpusError> {
    if max_chars == 0 {
        return Err(CorpusError::InvalidThreshold);
    }
    let kept: Vec<TraceRecord> = dataset
        .records
        .iter()
        .filter(|r| r.question.chars().count() + r.char_len() < max_chars)
        .cloned()
        .collect();
    let dropped = dataset.len() - kept.len();
    Ok((
        dataset.derive(kept, &format!("filter max_chars={max_chars}")),
        dropped,
    ))
}
