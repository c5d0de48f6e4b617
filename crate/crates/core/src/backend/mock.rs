//! Scripted backend for tests and offline runs.
//!
//! A [`MockScript`] is an ordered list of rules, each a [`Matcher`] and a
//! queue of replies. A request consumes the next reply of the first rule
//! that matches it and still has replies left. An optional responder
//! function handles whatever the rules do not.

use std::collections::VecDeque;
use std::sync::Mutex;

use super::wire::{Choice, CompletionRequest, CompletionResponse, Logprobs, RequestKind};
use super::Backend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matcher {
    kind: Option<RequestKind>,
    prompt_contains: Option<String>,
}

impl Matcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn generate() -> Self {
        Self {
            kind: Some(RequestKind::Generate),
            ..Self::default()
        }
    }

    pub fn score() -> Self {
        Self {
            kind: Some(RequestKind::Score),
            ..Self::default()
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains = Some(needle.into());
        self
    }

    pub fn matches(&self, request: &CompletionRequest) -> bool {
        self.kind.is_none_or(|k| k == request.kind())
            && self
                .prompt_contains
                .as_deref()
                .is_none_or(|n| request.prompt.contains(n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// Completion text.
    Text(String),
    /// One log-probability per continuation token; the continuation is cut
    /// into that many character chunks.
    Logprobs(Vec<f64>),
    /// Explicit continuation tokens and their log-probabilities.
    Tokens(Vec<(String, f64)>),
    /// Non-success HTTP status with a body.
    Status(u16, String),
    /// Connection-level failure.
    TransportFailure(String),
}

impl MockReply {
    pub fn text(t: impl Into<String>) -> Self {
        MockReply::Text(t.into())
    }

    pub fn logprobs(lps: &[f64]) -> Self {
        MockReply::Logprobs(lps.to_vec())
    }
}

type Responder = Box<dyn Fn(&CompletionRequest) -> Option<MockReply> + Send + Sync>;

#[derive(Default)]
pub struct MockScript {
    rules: Vec<(Matcher, VecDeque<MockReply>)>,
    responder: Option<Responder>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reply(self, matcher: Matcher, reply: MockReply) -> Self {
        self.replies(matcher, [reply])
    }

    pub fn replies(
        mut self,
        matcher: Matcher,
        replies: impl IntoIterator<Item = MockReply>,
    ) -> Self {
        self.rules.push((matcher, replies.into_iter().collect()));
        self
    }

    /// Fallback consulted after the rules; `None` means unscripted.
    pub fn responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Option<MockReply> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    fn is_empty(&self) -> bool {
        self.responder.is_none() && self.rules.iter().all(|(_, q)| q.is_empty())
    }
}

pub struct MockBackend {
    name: String,
    state: Mutex<MockState>,
    responder: Option<Responder>,
    logprobs: bool,
}

struct MockState {
    rules: Vec<(Matcher, VecDeque<MockReply>)>,
    log: Vec<CompletionRequest>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("name", &self.name)
            .finish()
    }
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self> {
        if script.is_empty() {
            return Err(Error::Precondition("mock script has no replies".into()));
        }
        Ok(Self {
            name: "mock".into(),
            state: Mutex::new(MockState {
                rules: script.rules,
                log: Vec::new(),
            }),
            responder: script.responder,
            logprobs: true,
        })
    }

    /// Distinguishes several mocks in cache keys.
    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = false;
        self
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state.lock().expect("mock poisoned").log.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().expect("mock poisoned").log.len()
    }

    fn next_reply(&self, request: &CompletionRequest) -> Result<MockReply> {
        let scripted = {
            let mut state = self.state.lock().expect("mock poisoned");
            state.log.push(request.clone());
            state
                .rules
                .iter_mut()
                .find(|(m, q)| !q.is_empty() && m.matches(request))
                .and_then(|(_, q)| q.pop_front())
        };
        scripted
            .or_else(|| self.responder.as_ref().and_then(|f| f(request)))
            .ok_or_else(|| {
                let preview: String = request.prompt.chars().take(60).collect();
                Error::Unscripted(format!("{} request {preview:?}", request.kind().as_str()))
            })
    }
}

fn chunk_chars(s: &str, n: usize) -> Result<Vec<String>> {
    let chars: Vec<char> = s.chars().collect();
    if n == 0 || n > chars.len() {
        return Err(Error::Precondition(format!(
            "cannot split {} characters into {n} tokens",
            chars.len()
        )));
    }
    let base = chars.len() / n;
    let extra = chars.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(chars[pos..pos + len].iter().collect());
        pos += len;
    }
    Ok(out)
}

fn echo_response(
    request: &CompletionRequest,
    continuation: Vec<(String, f64)>,
) -> Result<CompletionResponse> {
    let offset = request.continuation_offset.ok_or_else(|| {
        Error::Precondition("score reply for a request without a continuation".into())
    })?;
    let context: String = request.prompt.chars().take(offset).collect();
    let mut tokens = vec![context];
    let mut token_logprobs = vec![None];
    let mut text_offset = vec![0];
    let mut pos = offset;
    for (t, lp) in continuation {
        text_offset.push(pos);
        pos += t.chars().count();
        tokens.push(t);
        token_logprobs.push(Some(lp));
    }
    Ok(CompletionResponse {
        choices: vec![Choice {
            text: request.prompt.clone(),
            logprobs: Some(Logprobs {
                tokens,
                token_logprobs,
                text_offset: Some(text_offset),
            }),
        }],
    })
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        format!("mock:{}", self.name)
    }

    fn supports_logprobs(&self) -> bool {
        self.logprobs
    }

    fn complete_raw(&self, request: &CompletionRequest) -> Result<String> {
        let response = match self.next_reply(request)? {
            MockReply::Text(text) => CompletionResponse {
                choices: vec![Choice {
                    text,
                    logprobs: None,
                }],
            },
            MockReply::Logprobs(lps) => {
                let offset = request.continuation_offset.unwrap_or(0);
                let continuation: String = request.prompt.chars().skip(offset).collect();
                let pieces = chunk_chars(&continuation, lps.len())?;
                echo_response(request, pieces.into_iter().zip(lps).collect())?
            }
            MockReply::Tokens(tokens) => echo_response(request, tokens)?,
            MockReply::Status(status, body) => return Err(Error::BackendStatus { status, body }),
            MockReply::TransportFailure(msg) => return Err(Error::Transport(msg)),
        };
        Ok(serde_json::to_string(&response)?)
    }
}
