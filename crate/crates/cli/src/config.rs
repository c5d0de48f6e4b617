//! Run configuration: a flat TOML document, overridden by `--set key=value`
//! pairs and then by dedicated flags.

use std::path::{Path, PathBuf};

use distrank::backend::DEFAULT_CONCURRENCY;
use distrank::pipeline::{GenerationRoute, GenerationSettings, Strategy, DEFAULT_K, DEFAULT_N};
use distrank::preference::DEFAULT_THRESHOLDS;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub split_ratio: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub concurrency: usize,

    pub n: usize,
    pub k: usize,
    pub route: GenerationRoute,
    pub strategy: Strategy,

    pub generator_kind: BackendKind,
    pub generator_endpoint: Option<String>,
    pub generator_model: String,
    pub generator_mock_script: Option<PathBuf>,

    pub scorer_kind: BackendKind,
    pub scorer_endpoint: Option<String>,
    pub scorer_model: String,
    pub scorer_mock_script: Option<PathBuf>,

    pub cot_max_tokens: u32,
    pub ft_max_tokens: u32,
    pub ft_temperature: f64,
    pub ft_top_p_phase1: f64,
    pub ft_top_p_phase2: f64,

    pub timeout_secs: u64,
    pub retry_backoff_ms: u64,

    pub thresholds: Vec<f64>,
    pub eval_items: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenerationSettings::default();
        Self {
            dataset: None,
            split_ratio: 0.8,
            seed: 0,
            output_dir: PathBuf::from("out"),
            cache_dir: None,
            concurrency: DEFAULT_CONCURRENCY,
            n: DEFAULT_N,
            k: DEFAULT_K,
            route: GenerationRoute::Cot,
            strategy: Strategy::TopK,
            generator_kind: BackendKind::Http,
            generator_endpoint: None,
            generator_model: String::new(),
            generator_mock_script: None,
            scorer_kind: BackendKind::Http,
            scorer_endpoint: None,
            scorer_model: String::new(),
            scorer_mock_script: None,
            cot_max_tokens: gen.cot_max_tokens,
            ft_max_tokens: gen.ft_max_tokens,
            ft_temperature: gen.ft_temperature,
            ft_top_p_phase1: gen.ft_top_p_phase1,
            ft_top_p_phase2: gen.ft_top_p_phase2,
            timeout_secs: 120,
            retry_backoff_ms: 1000,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            eval_items: distrank::humaneval::DEFAULT_EVAL_ITEMS,
        }
    }
}

impl RunConfig {
    /// Merge defaults, the optional file, then overrides (later wins).
    pub fn load(
        file: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.k == 0 || self.n < self.k {
            return Err(CliError::config(format!(
                "need n >= k >= 1, got n={} k={}",
                self.n, self.k
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::config(format!(
                "split_ratio {} not in (0, 1)",
                self.split_ratio
            )));
        }
        if self.concurrency == 0 {
            return Err(CliError::config("concurrency must be at least 1"));
        }
        Ok(())
    }

    pub fn generation_settings(&self) -> GenerationSettings {
        GenerationSettings {
            cot_max_tokens: self.cot_max_tokens,
            ft_max_tokens: self.ft_max_tokens,
            ft_temperature: self.ft_temperature,
            ft_top_p_phase1: self.ft_top_p_phase1,
            ft_top_p_phase2: self.ft_top_p_phase2,
            seed: distrank::seed::sub_seed(self.seed, "generation"),
        }
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        let path = self.dataset.as_deref().ok_or_else(|| {
            CliError::config("no dataset configured (set `dataset` or pass --dataset)")
        })?;
        if !path.exists() {
            return Err(CliError::io(format!(
                "dataset {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Parse `key=value`; the value is read as TOML, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
