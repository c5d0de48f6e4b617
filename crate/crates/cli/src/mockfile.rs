//! JSON description of a scripted backend, so offline runs need no server.
//!
//! ```json
//! {
//!   "rules": [{"kind": "generate", "contains": "fifty five", "replies": [{"text": "..."}]}],
//!   "default_text": "Distractor1: ...",
//!   "default_score": {"per_char": -0.5}
//! }
//! ```

use std::path::Path;

use distrank::backend::{
    CompletionRequest, Matcher, MockBackend, MockReply, MockScript, RequestKind,
};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFile {
    #[serde(default)]
    pub rules: Vec<RuleFile>,
    pub default_text: Option<String>,
    pub default_score: Option<ScoreFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub kind: Option<KindFile>,
    pub contains: Option<String>,
    pub replies: Vec<ReplyFile>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindFile {
    Generate,
    Score,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReplyFile {
    Text(String),
    Logprobs(Vec<f64>),
    Status { status: u16, body: String },
}

/// Fallback for scoring requests no rule matched.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreFile {
    /// Every continuation character is one token with this log-probability.
    PerChar(f64),
    /// One token per continuation, log-probability in (-10, 0) derived from
    /// a hash of the continuation text.
    Hashed,
}

fn hashed_logprob(text: &str) -> f64 {
    let digest = Sha256::digest(text.as_bytes());
    let word = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    let unit = (word >> 11) as f64 / (1u64 << 53) as f64;
    -10.0 * (1.0 - unit).max(1e-9)
}

fn continuation(req: &CompletionRequest) -> &str {
    let chars = req.continuation_offset.unwrap_or(0);
    let start = req
        .prompt
        .char_indices()
        .nth(chars)
        .map_or(req.prompt.len(), |(i, _)| i);
    &req.prompt[start..]
}

impl MockFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("mock script {}: {e}", path.display())))
    }

    pub fn into_backend(self, name: &str) -> Result<MockBackend, CliError> {
        let mut script = MockScript::new();
        for rule in self.rules {
            let mut matcher = match rule.kind {
                None => Matcher::any(),
                Some(KindFile::Generate) => Matcher::generate(),
                Some(KindFile::Score) => Matcher::score(),
            };
            if let Some(c) = rule.contains {
                matcher = matcher.containing(c);
            }
            let replies = rule.replies.into_iter().map(|r| match r {
                ReplyFile::Text(t) => MockReply::Text(t),
                ReplyFile::Logprobs(l) => MockReply::Logprobs(l),
                ReplyFile::Status { status, body } => MockReply::Status(status, body),
            });
            script = script.replies(matcher, replies);
        }
        let (text, score) = (self.default_text, self.default_score);
        if text.is_some() || score.is_some() {
            script = script.responder(move |req| match req.kind() {
                RequestKind::Generate => text.clone().map(MockReply::Text),
                RequestKind::Score => {
                    let cont = continuation(req);
                    match score? {
                        ScoreFile::PerChar(lp) => Some(MockReply::Tokens(
                            cont.chars().map(|c| (c.to_string(), lp)).collect(),
                        )),
                        ScoreFile::Hashed => Some(MockReply::Tokens(vec![(
                            cont.to_string(),
                            hashed_logprob(cont),
                        )])),
                    }
                }
            });
        }
        Ok(MockBackend::new(script)?.named(name))
    }
}
