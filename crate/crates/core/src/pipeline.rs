//! Overgenerate-and-rank.
//!
//! Candidate pools come from one of two generation procedures:
//!
//! - chain-of-thought ([`overgenerate_cot`]): ask for 15 distractors with
//!   greedy decoding, then re-prompt once with the already generated ones as
//!   an avoid list if fewer than `n` unique survive;
//! - fine-tuned generator ([`overgenerate_ft`]): 5 nucleus samples of 3
//!   distractors at `top_p = 0.9`, then 5 more at `top_p = 1.0` if short.
//!
//! Both drop duplicates and key matches, keep arrival order, and pad with
//! the literal `"placeholder"` to exactly `n`. The final `k` come from
//! [`select_top_k`] (ranking-model score), [`select_rand_k`], or directly
//! from [`generate_only_k`].

use log::warn;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::backend::{score_all, DecodeParams, Generator, Scorer};
use crate::error::{Error, Result};
use crate::mcq::{normalize_text, texts_equal, Mcq};
use crate::prompt::{
    parse_numbered_output, render_cot_prompt, render_ft_prompt, render_ranking_prompt,
    COT_REQUEST_COUNT, FT_REQUEST_COUNT,
};
use crate::seed;

pub const PLACEHOLDER: &str = "placeholder";
pub const DEFAULT_N: usize = 10;
pub const DEFAULT_K: usize = 3;
/// Generate calls per fine-tuned sampling phase.
pub const FT_CALLS_PER_PHASE: usize = 5;
pub const ONLY_K_BEAMS: u32 = 5;
pub const ONLY_K_NUCLEUS_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    CotRound1,
    CotRound2,
    FtNucleus1,
    FtNucleus2,
    Beam,
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub feedback: String,
    pub source: CandidateSource,
    pub score: Option<f64>,
}

impl Candidate {
    pub fn new(
        text: impl Into<String>,
        feedback: impl Into<String>,
        source: CandidateSource,
    ) -> Self {
        Self {
            text: text.into(),
            feedback: feedback.into(),
            source,
            score: None,
        }
    }

    pub fn placeholder() -> Self {
        Self::new(PLACEHOLDER, "", CandidateSource::Placeholder)
    }

    pub fn is_placeholder(&self) -> bool {
        self.source == CandidateSource::Placeholder
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mcq_id: String,
    pub candidates: Vec<Candidate>,
    pub target_n: usize,
}

impl CandidateSet {
    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TopK,
    RandK,
    OnlyK,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TopK => "top_k",
            Strategy::RandK => "rand_k",
            Strategy::OnlyK => "only_k",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top_k" => Ok(Strategy::TopK),
            "rand_k" => Ok(Strategy::RandK),
            "only_k" => Ok(Strategy::OnlyK),
            other => Err(Error::Precondition(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mcq_id: String,
    pub strategy: Strategy,
    pub chosen: Vec<Candidate>,
}

impl SelectionResult {
    pub fn chosen_texts(&self) -> Vec<String> {
        self.chosen.iter().map(|c| c.text.clone()).collect()
    }
}

/// Knobs for the generation procedures. Defaults follow the published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub cot_max_tokens: u32,
    pub ft_max_tokens: u32,
    pub ft_temperature: f64,
    pub ft_top_p_phase1: f64,
    pub ft_top_p_phase2: f64,
    /// Base for per-call sampling seeds.
    pub seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            cot_max_tokens: 2048,
            ft_max_tokens: 512,
            ft_temperature: 1.0,
            ft_top_p_phase1: 0.9,
            ft_top_p_phase2: 1.0,
            seed: 0,
        }
    }
}

impl GenerationSettings {
    fn call_seed(&self, mcq: &Mcq, tag: &str, call: usize) -> u64 {
        seed::sub_seed(self.seed, &format!("{}/{tag}/{call}", mcq.id))
    }
}

/// Arrival-ordered pool of unique, non-key candidates.
struct Pool<'a> {
    key: &'a str,
    items: Vec<Candidate>,
}

impl<'a> Pool<'a> {
    fn new(key: &'a str) -> Self {
        Self {
            key,
            items: Vec::new(),
        }
    }

    fn offer(&mut self, feedback: &str, text: &str, source: CandidateSource) -> bool {
        let text = normalize_text(text);
        if text.is_empty()
            || texts_equal(&text, self.key)
            || self.items.iter().any(|c| texts_equal(&c.text, &text))
        {
            return false;
        }
        self.items
            .push(Candidate::new(text, normalize_text(feedback), source));
        true
    }

    fn absorb(
        &mut self,
        completion: Result<String>,
        expected: usize,
        source: CandidateSource,
    ) -> Result<()> {
        match parse_numbered_output(&completion?, expected) {
            Ok(pairs) => {
                for (feedback, text) in pairs {
                    self.offer(&feedback, &text, source);
                }
            }
            Err(Error::MalformedOutput) => {
                warn!("unparseable {source:?} completion; treating as empty");
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn finish(mut self, n: usize) -> Vec<Candidate> {
        self.items.truncate(n);
        let real = self.items.len();
        if real < n {
            warn!(
                "only {real} unique distractors; padding with {} placeholders",
                n - real
            );
        }
        self.items.resize_with(n, Candidate::placeholder);
        self.items
    }
}

/// Chain-of-thought overgeneration: at most two greedy generate calls.
pub fn overgenerate_cot<G: Generator + ?Sized>(
    mcq: &Mcq,
    generator: &G,
    n: usize,
    settings: &GenerationSettings,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    let params = DecodeParams::greedy(settings.cot_max_tokens);
    let mut pool = Pool::new(&mcq.key);

    let first = render_cot_prompt(mcq, &[]);
    pool.absorb(
        generator.generate(&first.text, &params),
        COT_REQUEST_COUNT,
        CandidateSource::CotRound1,
    )?;

    if pool.len() < n {
        let avoid: Vec<String> = pool.items.iter().map(|c| c.text.clone()).collect();
        let second = render_cot_prompt(mcq, &avoid);
        pool.absorb(
            generator.generate(&second.text, &params),
            COT_REQUEST_COUNT,
            CandidateSource::CotRound2,
        )?;
    }

    Ok(CandidateSet {
        mcq_id: mcq.id.clone(),
        candidates: pool.finish(n),
        target_n: n,
    })
}

/// Fine-tuned-generator overgeneration: at most two phases of five nucleus
/// samples each.
pub fn overgenerate_ft<G: Generator + ?Sized>(
    mcq: &Mcq,
    generator: &G,
    n: usize,
    settings: &GenerationSettings,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    let prompt = render_ft_prompt(mcq);
    let mut pool = Pool::new(&mcq.key);
    let phases = [
        (settings.ft_top_p_phase1, CandidateSource::FtNucleus1, "ft1"),
        (settings.ft_top_p_phase2, CandidateSource::FtNucleus2, "ft2"),
    ];
    for (top_p, source, tag) in phases {
        if pool.len() >= n {
            break;
        }
        for call in 0..FT_CALLS_PER_PHASE {
            let params =
                DecodeParams::nucleus(settings.ft_temperature, top_p, settings.ft_max_tokens)
                    .with_seed(settings.call_seed(mcq, tag, call));
            pool.absorb(
                generator.generate(&prompt.text, &params),
                FT_REQUEST_COUNT,
                source,
            )?;
        }
    }
    Ok(CandidateSet {
        mcq_id: mcq.id.clone(),
        candidates: pool.finish(n),
        target_n: n,
    })
}

/// Direct generation of `k` distractors: one beam-search call, then up to two
/// nucleus calls if fewer than `k` unique non-key texts came back.
pub fn generate_only_k<G: Generator + ?Sized>(
    mcq: &Mcq,
    generator: &G,
    k: usize,
    settings: &GenerationSettings,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    let prompt = render_ft_prompt(mcq);
    let expected = FT_REQUEST_COUNT.max(k);
    let mut pool = Pool::new(&mcq.key);

    let beam = DecodeParams::beam(ONLY_K_BEAMS, settings.ft_max_tokens);
    pool.absorb(
        generator.generate(&prompt.text, &beam),
        expected,
        CandidateSource::Beam,
    )?;

    for call in 0..ONLY_K_NUCLEUS_RETRIES {
        if pool.len() >= k {
            break;
        }
        let params = DecodeParams::nucleus(
            settings.ft_temperature,
            settings.ft_top_p_phase1,
            settings.ft_max_tokens,
        )
        .with_seed(settings.call_seed(mcq, "only_k", call));
        pool.absorb(
            generator.generate(&prompt.text, &params),
            expected,
            CandidateSource::FtNucleus1,
        )?;
    }

    Ok(SelectionResult {
        mcq_id: mcq.id.clone(),
        strategy: Strategy::OnlyK,
        chosen: pool.finish(k),
    })
}

/// Indices of the `k` best entries: highest score first, ties by ascending
/// normalized text.
pub fn top_k_indices(scores: &[f64], texts: &[&str], k: usize) -> Vec<usize> {
    let keys: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    order.truncate(k);
    order
}

/// Score every candidate with the ranking prompt and keep the `k` highest.
///
/// Scores are written back onto `cs`.
pub fn select_top_k<S: Scorer + ?Sized>(
    mcq: &Mcq,
    cs: &mut CandidateSet,
    scorer: &S,
    k: usize,
) -> Result<SelectionResult> {
    if k == 0 || cs.candidates.len() < k {
        return Err(Error::Precondition(format!(
            "cannot select {k} of {} candidates",
            cs.candidates.len()
        )));
    }
    let prompts = cs
        .candidates
        .iter()
        .map(|c| render_ranking_prompt(mcq, &c.text))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_all(scorer, &prompts)?;
    for (c, s) in cs.candidates.iter_mut().zip(&scores) {
        c.score = Some(s.logprob_sum);
    }
    let values: Vec<f64> = scores.iter().map(|s| s.logprob_sum).collect();
    let chosen = top_k_indices(&values, &cs.texts(), k)
        .into_iter()
        .map(|i| cs.candidates[i].clone())
        .collect();
    Ok(SelectionResult {
        mcq_id: cs.mcq_id.clone(),
        strategy: Strategy::TopK,
        chosen,
    })
}

/// Uniform sample of `k` candidates without replacement, fixed by `seed`.
pub fn select_rand_k(cs: &CandidateSet, k: usize, seed: u64) -> Result<SelectionResult> {
    if k == 0 || cs.candidates.len() < k {
        return Err(Error::Precondition(format!(
            "cannot select {k} of {} candidates",
            cs.candidates.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let chosen = index::sample(&mut rng, cs.candidates.len(), k)
        .into_iter()
        .map(|i| cs.candidates[i].clone())
        .collect();
    Ok(SelectionResult {
        mcq_id: cs.mcq_id.clone(),
        strategy: Strategy::RandK,
        chosen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationRoute {
    Cot,
    Ft,
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub mcq_id: String,
    pub strategy: Strategy,
    pub candidates: Vec<Candidate>,
    pub chosen: Vec<String>,
}

impl SelectionRecord {
    pub fn new(candidates: Vec<Candidate>, selection: &SelectionResult) -> Self {
        Self {
            mcq_id: selection.mcq_id.clone(),
            strategy: selection.strategy,
            candidates,
            chosen: selection.chosen_texts(),
        }
    }
}

/// Everything needed to run one strategy over one question.
pub struct PipelineRun<'a> {
    pub generator: &'a dyn Generator,
    pub scorer: Option<&'a dyn Scorer>,
    pub route: GenerationRoute,
    pub strategy: Strategy,
    pub n: usize,
    pub k: usize,
    pub settings: GenerationSettings,
}

impl PipelineRun<'_> {
    pub fn run(&self, mcq: &Mcq) -> Result<SelectionRecord> {
        if self.strategy == Strategy::OnlyK {
            let sel = generate_only_k(mcq, self.generator, self.k, &self.settings)?;
            return Ok(SelectionRecord::new(sel.chosen.clone(), &sel));
        }
        let mut cs = match self.route {
            GenerationRoute::Cot => overgenerate_cot(mcq, self.generator, self.n, &self.settings)?,
            GenerationRoute::Ft => overgenerate_ft(mcq, self.generator, self.n, &self.settings)?,
        };
        let sel = match self.strategy {
            Strategy::TopK => {
                let scorer = self
                    .scorer
                    .ok_or_else(|| Error::Precondition("top_k requires a scorer".into()))?;
                select_top_k(mcq, &mut cs, scorer, self.k)?
            }
            _ => select_rand_k(
                &cs,
                self.k,
                seed::sub_seed(self.settings.seed, &format!("rand_k/{}", mcq.id)),
            )?,
        };
        Ok(SelectionRecord::new(cs.candidates, &sel))
    }
}
