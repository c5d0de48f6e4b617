//! JSON shapes of the completions endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Generate,
    Score,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Generate => "generate",
            RequestKind::Score => "score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub logprobs: u32,
    pub echo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_beams: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Character offset where the scored continuation starts. Not sent.
    #[serde(skip)]
    pub continuation_offset: Option<usize>,
}

impl CompletionRequest {
    pub fn kind(&self) -> RequestKind {
        if self.echo {
            RequestKind::Score
        } else {
            RequestKind::Generate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Logprobs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logprobs {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_offset: Option<Vec<usize>>,
}

impl CompletionResponse {
    pub fn parse(body: &str) -> Result<Self> {
        let response: CompletionResponse = serde_json::from_str(body)
            .map_err(|e| Error::Transport(format!("unparseable completion response: {e}")))?;
        response.first_choice()?;
        Ok(response)
    }

    pub fn first_choice(&self) -> Result<&Choice> {
        self.choices
            .first()
            .ok_or_else(|| Error::Transport("completion response has no choices".into()))
    }
}
