//! Question data model, text normalization, and JSON-lines dataset I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::seed;

/// Slack allowed on the sum of selection fractions.
pub const SELECTION_SUM_TOLERANCE: f64 = 1e-6;

/// An incorrect answer option with its feedback and observed selection fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub text: String,
    pub feedback: String,
    pub selection: f64,
}

impl Distractor {
    pub fn new(text: impl Into<String>, feedback: impl Into<String>, selection: f64) -> Self {
        Self {
            text: text.into(),
            feedback: feedback.into(),
            selection,
        }
    }
}

/// A math multiple-choice question with its human-authored distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mcq {
    pub id: String,
    pub stem: String,
    pub key: String,
    pub key_explanation: String,
    pub key_selection: f64,
    pub distractors: Vec<Distractor>,
}

impl Mcq {
    pub fn distractor_texts(&self) -> Vec<&str> {
        self.distractors.iter().map(|d| d.text.as_str()).collect()
    }
}

/// Train/test partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Mcq>,
    pub test: Vec<Mcq>,
    pub seed: u64,
    pub ratio: f64,
}

/// NFC-normalize, trim, and collapse internal whitespace runs to one space.
///
/// Case and punctuation are preserved.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact, case-sensitive equality after [`normalize_text`].
///
/// No numeric canonicalization: `"32,000"` and `"32000"` differ.
pub fn texts_equal(a: &str, b: &str) -> bool {
    a == b || normalize_text(a) == normalize_text(b)
}

fn in_unit_interval(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

/// Every violated invariant of `mcq`, one description each. Empty means valid.
pub fn validate_mcq(mcq: &Mcq) -> Vec<String> {
    let mut out = Vec::new();
    if normalize_text(&mcq.stem).is_empty() {
        out.push("stem is empty".to_string());
    }
    if normalize_text(&mcq.key).is_empty() {
        out.push("key is empty".to_string());
    }
    if normalize_text(&mcq.key_explanation).is_empty() {
        out.push("key_explanation is empty".to_string());
    }
    if !in_unit_interval(mcq.key_selection) {
        out.push(format!(
            "key_selection {} outside [0, 1]",
            mcq.key_selection
        ));
    }

    let normalized: Vec<String> = mcq
        .distractors
        .iter()
        .map(|d| normalize_text(&d.text))
        .collect();
    let key = normalize_text(&mcq.key);
    for (i, (d, text)) in mcq.distractors.iter().zip(&normalized).enumerate() {
        if text.is_empty() {
            out.push(format!("distractor {} text is empty", i + 1));
            continue;
        }
        if !in_unit_interval(d.selection) {
            out.push(format!(
                "distractor {:?} selection {} outside [0, 1]",
                d.text, d.selection
            ));
        }
        if *text == key {
            out.push(format!("distractor {:?} equals the key", d.text));
        }
        if normalized[..i].contains(text) {
            out.push(format!("duplicate distractor text {:?}", d.text));
        }
    }

    let total: f64 = mcq.key_selection + mcq.distractors.iter().map(|d| d.selection).sum::<f64>();
    if total > 1.0 + SELECTION_SUM_TOLERANCE {
        out.push(format!("selection fractions exceed 1 (sum {total})"));
    }
    out
}

/// Parse one JSON-lines record without validating it.
pub fn parse_record(line: &str, line_no: usize) -> Result<Mcq> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Read and validate every MCQ in a JSON-lines file, in file order.
///
/// Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Mcq>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mcq = parse_record(&line, i + 1)?;
        let violations = validate_mcq(&mcq);
        if !violations.is_empty() {
            return Err(Error::InvalidMcq {
                id: mcq.id,
                violations,
            });
        }
        out.push(mcq);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, mcqs: &[Mcq]) -> Result<()> {
    write_jsonl(path, mcqs)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Deterministically shuffle under `seed` and put the first `floor(ratio * N)` into train.
pub fn split_dataset(mcqs: &[Mcq], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Precondition(format!(
            "split ratio {ratio} not in (0, 1)"
        )));
    }
    if mcqs.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 MCQs to split, got {}",
            mcqs.len()
        )));
    }
    let mut order: Vec<usize> = (0..mcqs.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let n_train = (ratio * mcqs.len() as f64).floor() as usize;
    let (train, test) = order.split_at(n_train);
    Ok(DatasetSplit {
        train: train.iter().map(|&i| mcqs[i].clone()).collect(),
        test: test.iter().map(|&i| mcqs[i].clone()).collect(),
        seed,
        ratio,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The subtraction example used throughout the tests.
    pub fn subtraction() -> Mcq {
        Mcq {
            id: "q1".into(),
            stem: "fifty five thousand subtract twenty three thousand equals".into(),
            key: "32,000".into(),
            key_explanation: "55,000 - 23,000 = 32,000".into(),
            key_selection: 0.5,
            distractors: vec![
                Distractor::new("22,000", "Subtracted the ten thousands twice", 0.30),
                Distractor::new("23,000", "Wrote down the number being subtracted", 0.15),
                Distractor::new("3,200", "Misplaced the place value", 0.05),
            ],
        }
    }

    pub fn numbered(n: usize) -> Vec<Mcq> {
        (0..n)
            .map(|i| {
                let mut m = subtraction();
                m.id = format!("q{i}");
                m
            })
            .collect()
    }
}
