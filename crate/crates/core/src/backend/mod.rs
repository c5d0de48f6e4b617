//! Text generation and continuation scoring over a completions-style wire
//! contract.
//!
//! [`LlmClient`] is the entry point. It owns a [`Backend`] (the transport:
//! [`HttpBackend`] or [`MockBackend`]), an optional on-disk
//! [`ResponseCache`], and the in-flight request limit.

mod cache;
mod http;
mod mock;
mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, ResponseCache};
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use mock::{Matcher, MockBackend, MockReply, MockScript};
pub use wire::{Choice, CompletionRequest, CompletionResponse, Logprobs, RequestKind};

use crate::error::{Error, Result};
use crate::prompt::ScoringPrompt;

/// Default bound on concurrent in-flight backend requests.
pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Nucleus,
    Beam,
}

/// Decoding settings for one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub num_beams: Option<u32>,
    pub max_tokens: u32,
    /// Sampling seed forwarded to the server; also distinguishes repeated
    /// stochastic calls in the cache.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DecodeParams {
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 0.0,
            top_p: None,
            num_beams: None,
            max_tokens,
            seed: None,
        }
    }

    pub fn nucleus(temperature: f64, top_p: f64, max_tokens: u32) -> Self {
        Self {
            mode: DecodeMode::Nucleus,
            temperature,
            top_p: Some(top_p),
            num_beams: None,
            max_tokens,
            seed: None,
        }
    }

    pub fn beam(num_beams: u32, max_tokens: u32) -> Self {
        Self {
            mode: DecodeMode::Beam,
            temperature: 0.0,
            top_p: None,
            num_beams: Some(num_beams),
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Precondition(format!(
                "temperature {} must be finite and nonnegative",
                self.temperature
            )));
        }
        match self.mode {
            DecodeMode::Greedy => {}
            DecodeMode::Nucleus => match self.top_p {
                Some(p) if p > 0.0 && p <= 1.0 => {}
                Some(p) => return Err(Error::Precondition(format!("top_p {p} not in (0, 1]"))),
                None => {
                    return Err(Error::Precondition(
                        "nucleus decoding requires top_p".into(),
                    ))
                }
            },
            DecodeMode::Beam => match self.num_beams {
                Some(b) if b >= 2 => {}
                _ => {
                    return Err(Error::Precondition(
                        "beam search requires num_beams >= 2".into(),
                    ))
                }
            },
        }
        Ok(())
    }

    fn to_request(&self, model: &str, prompt: &str) -> CompletionRequest {
        let (temperature, top_p, num_beams) = match self.mode {
            DecodeMode::Greedy => (0.0, 1.0, None),
            DecodeMode::Nucleus => (self.temperature, self.top_p.unwrap_or(1.0), None),
            DecodeMode::Beam => (0.0, 1.0, self.num_beams),
        };
        CompletionRequest {
            model: model.to_string(),
            prompt: prompt.to_string(),
            max_tokens: self.max_tokens,
            temperature,
            top_p,
            logprobs: 0,
            echo: false,
            num_beams,
            seed: self.seed,
            continuation_offset: None,
        }
    }
}

/// Summed log-probability of a continuation (the ranking score).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub logprob_sum: f64,
    pub token_count: usize,
}

impl ScoreResult {
    pub fn new(logprob_sum: f64, token_count: usize) -> Result<Self> {
        if !logprob_sum.is_finite() || logprob_sum > 0.0 {
            return Err(Error::Undefined(format!(
                "log-probability sum {logprob_sum} is not a finite value <= 0"
            )));
        }
        if token_count == 0 {
            return Err(Error::Undefined("score over zero tokens".into()));
        }
        Ok(Self {
            logprob_sum,
            token_count,
        })
    }
}

/// Raw transport to a completions endpoint.
///
/// Implementations return the response body verbatim; parsing and caching
/// happen in [`LlmClient`].
pub trait Backend: Send + Sync {
    /// Stable identifier used in cache keys.
    fn id(&self) -> String;

    fn complete_raw(&self, request: &CompletionRequest) -> Result<String>;

    fn supports_logprobs(&self) -> bool {
        true
    }
}

/// Anything that can produce a completion for a prompt.
pub trait Generator: Sync {
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<String>;
}

/// Anything that assigns a ranking score to a distractor continuation.
pub trait Scorer: Sync {
    fn score(&self, prompt: &ScoringPrompt) -> Result<ScoreResult>;

    /// How many score calls may usefully run at once.
    fn concurrency(&self) -> usize {
        1
    }
}

impl<F> Scorer for F
where
    F: Fn(&ScoringPrompt) -> Result<ScoreResult> + Sync,
{
    fn score(&self, prompt: &ScoringPrompt) -> Result<ScoreResult> {
        self(prompt)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    limit: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.limit {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Generation and scoring client over a [`Backend`].
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    model: String,
    cache: Option<ResponseCache>,
    limiter: Limiter,
    backend_calls: AtomicUsize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.id())
            .field("model", &self.model)
            .field("cache", &self.cache)
            .field("concurrency", &self.limiter.limit)
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            cache: None,
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.limiter = Limiter::new(limit);
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Requests that reached the backend (cache hits excluded).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    fn execute(
        &self,
        kind: RequestKind,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse> {
        let key = CacheKey::new(&self.backend.id(), &self.model, request, kind);
        if let Some(cache) = &self.cache {
            if let Some(body) = cache.get(&key)? {
                return CompletionResponse::parse(&body);
            }
        }
        let body = {
            let _permit = self.limiter.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            self.backend.complete_raw(request)?
        };
        let response = CompletionResponse::parse(&body)?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &body)?;
        }
        Ok(response)
    }

    /// Completion text for `prompt`, served from the cache when possible.
    pub fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<String> {
        params.validate()?;
        let request = params.to_request(&self.model, prompt);
        let response = self.execute(RequestKind::Generate, &request)?;
        Ok(response.first_choice()?.text.clone())
    }

    /// Sum of the backend's per-token log-probabilities over the continuation.
    ///
    /// Context tokens contribute nothing. A token straddling the
    /// context/continuation boundary counts as a continuation token.
    pub fn score_continuation(&self, prompt: &ScoringPrompt) -> Result<ScoreResult> {
        prompt.validate()?;
        if !self.backend.supports_logprobs() {
            return Err(Error::Capability("per-token log-probabilities".into()));
        }
        let request = CompletionRequest {
            model: self.model.clone(),
            prompt: prompt.full_text(),
            max_tokens: 0,
            temperature: 0.0,
            top_p: 1.0,
            logprobs: 1,
            echo: true,
            num_beams: None,
            seed: None,
            continuation_offset: Some(prompt.context.chars().count()),
        };
        let response = self.execute(RequestKind::Score, &request)?;
        let logprobs = response
            .first_choice()?
            .logprobs
            .as_ref()
            .ok_or_else(|| Error::Capability("echoed log-probabilities in response".into()))?;
        continuation_logprob(logprobs, prompt.context.chars().count())
    }
}

/// Sum the log-probabilities of tokens ending past `context_chars`.
///
/// Token positions come from `text_offset` when the server reports it,
/// otherwise from cumulative token lengths.
pub fn continuation_logprob(logprobs: &Logprobs, context_chars: usize) -> Result<ScoreResult> {
    if logprobs.tokens.len() != logprobs.token_logprobs.len() {
        return Err(Error::Undefined(format!(
            "{} tokens but {} log-probabilities",
            logprobs.tokens.len(),
            logprobs.token_logprobs.len()
        )));
    }
    let offsets: Vec<usize> = match &logprobs.text_offset {
        Some(off) if off.len() == logprobs.tokens.len() => off.clone(),
        _ => logprobs
            .tokens
            .iter()
            .scan(0usize, |pos, t| {
                let start = *pos;
                *pos += t.chars().count();
                Some(start)
            })
            .collect(),
    };
    let mut sum = 0.0;
    let mut count = 0;
    for ((token, lp), start) in logprobs
        .tokens
        .iter()
        .zip(&logprobs.token_logprobs)
        .zip(offsets)
    {
        if start + token.chars().count() <= context_chars {
            continue;
        }
        let lp = lp.ok_or_else(|| {
            Error::Capability(format!("log-probability for continuation token {token:?}"))
        })?;
        sum += lp;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Undefined(
            "no continuation tokens in echoed response".into(),
        ));
    }
    ScoreResult::new(sum, count)
}

impl Generator for LlmClient {
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<String> {
        LlmClient::generate(self, prompt, params)
    }
}

impl Scorer for LlmClient {
    fn score(&self, prompt: &ScoringPrompt) -> Result<ScoreResult> {
        self.score_continuation(prompt)
    }

    fn concurrency(&self) -> usize {
        self.limiter.limit
    }
}

/// Score every prompt, running up to `scorer.concurrency()` calls at once.
///
/// Results come back in input order regardless of completion order.
pub fn score_all<S: Scorer + ?Sized>(
    scorer: &S,
    prompts: &[ScoringPrompt],
) -> Result<Vec<ScoreResult>> {
    let workers = scorer.concurrency().clamp(1, prompts.len().max(1));
    if workers == 1 {
        return prompts.iter().map(|p| scorer.score(p)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ScoreResult>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let r = scorer.score(&prompts[i]);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot poisoned")
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcq::fixtures::subtraction;
    use crate::prompt::render_ranking_prompt;

    fn client(script: MockScript) -> (Arc<MockBackend>, LlmClient) {
        let mock = Arc::new(MockBackend::new(script).unwrap());
        let client = LlmClient::new(mock.clone(), "mock-model");
        (mock, client)
    }

    #[test]
    fn decode_params_validation() {
        assert!(DecodeParams::greedy(10).validate().is_ok());
        assert!(DecodeParams::nucleus(1.0, 0.9, 10).validate().is_ok());
        assert!(DecodeParams::nucleus(1.0, 0.0, 10).validate().is_err());
        let mut p = DecodeParams::nucleus(1.0, 0.9, 10);
        p.top_p = None;
        assert!(p.validate().is_err());
        assert!(DecodeParams::beam(5, 10).validate().is_ok());
        assert!(DecodeParams::beam(1, 10).validate().is_err());
        assert!(DecodeParams::nucleus(-1.0, 0.9, 10).validate().is_err());
    }

    #[test]
    fn greedy_ignores_sampling_fields() {
        let mut p = DecodeParams::greedy(10);
        p.temperature = 0.7;
        p.top_p = Some(0.5);
        let r = p.to_request("m", "x");
        assert_eq!((r.temperature, r.top_p), (0.0, 1.0));
    }

    #[test]
    fn generate_returns_scripted_text() {
        let (mock, c) = client(
            MockScript::new().reply(Matcher::generate(), MockReply::text("Distractor1: 33,000")),
        );
        assert_eq!(
            c.generate("p", &DecodeParams::greedy(8)).unwrap(),
            "Distractor1: 33,000"
        );
        assert_eq!(mock.requests().len(), 1);
    }

    #[test]
    fn constant_token_logprobs_sum() {
        let (_, c) = client(
            MockScript::new().reply(Matcher::score(), MockReply::logprobs(&[-1.0, -1.0, -1.0])),
        );
        let p = render_ranking_prompt(&subtraction(), "33,000").unwrap();
        let r = c.score_continuation(&p).unwrap();
        assert_eq!(
            r,
            ScoreResult {
                logprob_sum: -3.0,
                token_count: 3
            }
        );
    }

    #[test]
    fn two_token_logprobs_sum() {
        let (_, c) =
            client(MockScript::new().reply(Matcher::score(), MockReply::logprobs(&[-0.5, -2.25])));
        let p = render_ranking_prompt(&subtraction(), "33,000").unwrap();
        let r = c.score_continuation(&p).unwrap();
        assert_eq!(r.logprob_sum, -2.75);
        assert_eq!(r.token_count, 2);
    }

    #[test]
    fn empty_continuation_is_rejected() {
        let (mock, c) =
            client(MockScript::new().reply(Matcher::any(), MockReply::logprobs(&[-1.0])));
        let mut p = render_ranking_prompt(&subtraction(), "x").unwrap();
        p.continuation.clear();
        assert!(matches!(
            c.score_continuation(&p),
            Err(Error::Precondition(_))
        ));
        assert!(mock.requests().is_empty());
    }

    #[test]
    fn scoring_without_logprob_support_is_a_capability_error() {
        let mock = Arc::new(
            MockBackend::new(MockScript::new().reply(Matcher::any(), MockReply::text("x")))
                .unwrap()
                .without_logprobs(),
        );
        let c = LlmClient::new(mock, "m");
        let p = render_ranking_prompt(&subtraction(), "1").unwrap();
        assert!(matches!(
            c.score_continuation(&p),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn straddling_token_counts_toward_continuation() {
        // context "ab: " (4 chars), continuation "12"; tokenizer merged " 1"
        let lp = Logprobs {
            tokens: vec!["ab".into(), ":".into(), " 1".into(), "2".into()],
            token_logprobs: vec![None, Some(-0.1), Some(-0.5), Some(-0.25)],
            text_offset: None,
        };
        let r = continuation_logprob(&lp, 4).unwrap();
        assert_eq!(
            r,
            ScoreResult {
                logprob_sum: -0.75,
                token_count: 2
            }
        );
    }

    #[test]
    fn text_offsets_take_precedence() {
        let lp = Logprobs {
            // offsets skip a character the token strings do not cover
            tokens: vec!["a".into(), "b".into(), "c".into()],
            token_logprobs: vec![None, Some(-1.0), Some(-2.0)],
            text_offset: Some(vec![0, 2, 3]),
        };
        assert_eq!(continuation_logprob(&lp, 3).unwrap().logprob_sum, -2.0);
    }

    #[test]
    fn score_all_preserves_order_under_concurrency() {
        struct Slow;
        impl Scorer for Slow {
            fn score(&self, p: &ScoringPrompt) -> Result<ScoreResult> {
                let v: f64 = p.continuation.parse().unwrap();
                std::thread::sleep(std::time::Duration::from_millis((10.0 - v) as u64));
                ScoreResult::new(-v, 1)
            }
            fn concurrency(&self) -> usize {
                4
            }
        }
        let prompts: Vec<_> = (0..10)
            .map(|i| render_ranking_prompt(&subtraction(), &i.to_string()).unwrap())
            .collect();
        let out = score_all(&Slow, &prompts).unwrap();
        let got: Vec<f64> = out.iter().map(|r| r.logprob_sum).collect();
        let want: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn limiter_bounds_in_flight() {
        let limiter = Limiter::new(2);
        let peak = AtomicUsize::new(0);
        let current = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
