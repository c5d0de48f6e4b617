//! Prompt templates for generation and ranking, and parsing of labelled
//! `DistractorN Feedback:` / `DistractorN:` completions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcq::{normalize_text, Mcq};

/// Number of distractors the chain-of-thought prompt asks for.
pub const COT_REQUEST_COUNT: usize = 15;
/// Number of distractors the fine-tuned generator prompt asks for.
pub const FT_REQUEST_COUNT: usize = 3;
/// Suffix every ranking context ends with.
pub const SCORING_CUE: &str = "Distractor: ";

const COT_PREAMBLE: &str = "You are provided with a math question, correct answer, and the explanation of correct answer. Your task is to use the following template to create 15 unique incorrect answers (distractors) to be used as multiple-choice options for a middle school math multiple-choice question. Before generating each distractor, include a concise explanation to clarify for students why that is not the correct answer. Make sure each distractor is clearly different from the correct answer and distinct from each other, this is very important!";

const FT_PREAMBLE: &str = "You are provided with a math question, correct answer, and the explanation of correct answer. Your task is to generate 3 unique incorrect answers (distractors) to be used as multiple-choice options for a middle school math multiple-choice question. Before generating each distractor, include a concise explanation for students to clarify why that is not the correct answer. Ensure each distractor is different from the correct answer and distinct from the others; this is very important!";

const RANK_PREAMBLE: &str =
    "A teacher assigns the following math question to a class of middle school students.";
const RANK_INSTRUCTION: &str =
    "Generate a distractor for this question that targets some student misconception.";

const AVOID_HEADER: &str = "Do not produce any of the following previously generated distractors; every new distractor must be different from all of them:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Cot15,
    Ft3,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub kind: PromptKind,
    pub mcq_id: String,
}

/// A ranking context and the distractor whose likelihood is scored after it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoringPrompt {
    pub context: String,
    pub continuation: String,
}

impl ScoringPrompt {
    pub fn full_text(&self) -> String {
        format!("{}{}", self.context, self.continuation)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.context.ends_with(SCORING_CUE) {
            return Err(Error::Precondition(format!(
                "scoring context must end with {SCORING_CUE:?}"
            )));
        }
        if self.continuation.is_empty() {
            return Err(Error::Precondition("empty continuation".into()));
        }
        Ok(())
    }
}

fn question_block(mcq: &Mcq) -> String {
    format!(
        "Question: {}\nExplanation: {}\nAnswer: {}",
        mcq.stem, mcq.key_explanation, mcq.key
    )
}

/// Chain-of-thought prompt asking for 15 distractors, each preceded by feedback.
///
/// A non-empty `avoid` list is appended as a block of forbidden distractors.
pub fn render_cot_prompt(mcq: &Mcq, avoid: &[String]) -> RenderedPrompt {
    let mut text = String::with_capacity(2048);
    text.push_str(COT_PREAMBLE);
    text.push_str("\n[Template]\n");
    for i in 1..=COT_REQUEST_COUNT {
        let _ = writeln!(text, "Distractor{i} Feedback:\nDistractor{i}:");
    }
    text.push_str(&question_block(mcq));
    if !avoid.is_empty() {
        text.push_str("\n\n");
        text.push_str(AVOID_HEADER);
        for a in avoid {
            let _ = write!(text, "\n- {a}");
        }
    }
    RenderedPrompt {
        text,
        kind: PromptKind::Cot15,
        mcq_id: mcq.id.clone(),
    }
}

/// Prompt for the fine-tuned generator, asking for 3 distractors.
pub fn render_ft_prompt(mcq: &Mcq) -> RenderedPrompt {
    RenderedPrompt {
        text: format!("{FT_PREAMBLE}\n{}", question_block(mcq)),
        kind: PromptKind::Ft3,
        mcq_id: mcq.id.clone(),
    }
}

/// Ranking context for `mcq`, ending with [`SCORING_CUE`].
pub fn ranking_context(mcq: &Mcq) -> String {
    format!(
        "{RANK_PREAMBLE}\n\nQuestion: {}\nSolution: {}\nCorrect answer: {}\n{RANK_INSTRUCTION}\n\n{SCORING_CUE}",
        mcq.stem, mcq.key_explanation, mcq.key
    )
}

pub fn render_ranking_prompt(mcq: &Mcq, distractor_text: &str) -> Result<ScoringPrompt> {
    if distractor_text.is_empty() {
        return Err(Error::Precondition("empty distractor text".into()));
    }
    Ok(ScoringPrompt {
        context: ranking_context(mcq),
        continuation: distractor_text.to_string(),
    })
}

/// Format `(feedback, distractor)` pairs the way the templates ask the model to.
pub fn render_completion(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (i, (feedback, text)) in pairs.iter().enumerate() {
        let n = i + 1;
        let _ = writeln!(
            out,
            "Distractor{n} Feedback: {feedback}\nDistractor{n}: {text}"
        );
    }
    out
}

static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[ \t*#>\-]*distractor[ \t]*(\d+)[ \t]*(feedback)?[ \t]*\**[ \t]*:[ \t*]*")
        .expect("label regex")
});

/// Extract up to `expected_n` `(feedback, distractor)` pairs in index order.
///
/// Missing items are skipped; a distractor is the first non-empty line after
/// its label. Fails with [`Error::MalformedOutput`] only when nothing can be
/// extracted.
pub fn parse_numbered_output(text: &str, expected_n: usize) -> Result<Vec<(String, String)>> {
    if expected_n == 0 {
        return Err(Error::Precondition("expected_n must be at least 1".into()));
    }
    let labels: Vec<_> = LABEL.captures_iter(text).collect();
    let mut feedback: BTreeMap<usize, String> = BTreeMap::new();
    let mut answers: BTreeMap<usize, String> = BTreeMap::new();
    for (i, caps) in labels.iter().enumerate() {
        let whole = caps.get(0).expect("group 0");
        let end = labels
            .get(i + 1)
            .map(|c| c.get(0).expect("group 0").start())
            .unwrap_or(text.len());
        let body = &text[whole.end()..end];
        let Ok(index) = caps[1].parse::<usize>() else {
            continue;
        };
        if caps.get(2).is_some() {
            feedback
                .entry(index)
                .or_insert_with(|| normalize_text(body));
        } else {
            let first_line = body
                .lines()
                .map(normalize_text)
                .find(|l| !l.is_empty())
                .unwrap_or_default();
            answers.entry(index).or_insert(first_line);
        }
    }

    let pairs: Vec<(String, String)> = (1..=expected_n)
        .filter_map(|i| {
            let text = answers.get(&i)?;
            if text.is_empty() {
                return None;
            }
            Some((feedback.get(&i).cloned().unwrap_or_default(), text.clone()))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::MalformedOutput);
    }
    Ok(pairs)
}
