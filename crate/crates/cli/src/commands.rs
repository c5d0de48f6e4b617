use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use distrank::backend::{score_all, Backend, HttpBackend, HttpConfig, LlmClient, ResponseCache};
use distrank::humaneval::{
    analyze_rankings, analyze_ratings, answer_key_path, export_rank_csv, export_rate_csv,
    import_rank_csv, import_rate_csv, merge_rank_raters, merge_rate_raters, rank_ground_truth,
    read_answer_key, sample_eval_mcqs,
};
use distrank::mcq::{load_dataset, split_dataset, write_dataset};
use distrank::metrics::{aggregate, alignment_scores, render_table, AggregateReport};
use distrank::pipeline::{PipelineRun, SelectionRecord, Strategy};
use distrank::preference::{build_preference_pairs, export_training_data, ranking_accuracy};
use distrank::prompt::render_ranking_prompt;
use distrank::seed::sub_seed;
use distrank::Mcq;
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;
use crate::mockfile::MockFile;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: String,
    config: &'a RunConfig,
    seeds: BTreeMap<&'a str, u64>,
    inputs: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
}

/// Collects the inputs, outputs, and seeds of one command run.
pub struct Run<'a> {
    command: &'a str,
    config: &'a RunConfig,
    seeds: BTreeMap<&'a str, u64>,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

fn file_digest(path: &Path) -> CliResult<FileDigest> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::validation(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::validation(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn read_selections(path: &Path) -> CliResult<Vec<SelectionRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::validation(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

impl<'a> Run<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig) -> CliResult<Self> {
        std::fs::create_dir_all(&config.output_dir)
            .map_err(|e| CliError::io(format!("{}: {e}", config.output_dir.display())))?;
        let mut seeds = BTreeMap::new();
        seeds.insert("global", config.seed);
        Ok(Self {
            command,
            config,
            seeds,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    fn seed(&mut self, name: &'a str) -> u64 {
        let s = sub_seed(self.config.seed, name);
        self.seeds.insert(name, s);
        s
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.config.output_dir.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn dataset(&mut self) -> CliResult<Vec<Mcq>> {
        let path = self.config.dataset()?.to_path_buf();
        self.input(&path);
        Ok(load_dataset(&path)?)
    }

    /// Write `manifest-<command>.json` next to the artifacts.
    pub fn finish(self) -> CliResult<PathBuf> {
        let manifest = Manifest {
            command: self.command,
            config_digest: self.config.digest(),
            config: self.config,
            seeds: self.seeds,
            inputs: self
                .inputs
                .iter()
                .map(|p| file_digest(p))
                .collect::<CliResult<_>>()?,
            artifacts: self
                .artifacts
                .iter()
                .map(|p| file_digest(p))
                .collect::<CliResult<_>>()?,
        };
        let path = self
            .config
            .output_dir
            .join(format!("manifest-{}.json", self.command));
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

#[derive(Clone, Copy)]
enum Role {
    Generator,
    Scorer,
}

fn client(config: &RunConfig, role: Role) -> CliResult<LlmClient> {
    let (kind, endpoint, model, script, name) = match role {
        Role::Generator => (
            config.generator_kind,
            &config.generator_endpoint,
            &config.generator_model,
            &config.generator_mock_script,
            "generator",
        ),
        Role::Scorer => (
            config.scorer_kind,
            &config.scorer_endpoint,
            &config.scorer_model,
            &config.scorer_mock_script,
            "scorer",
        ),
    };
    let backend: Arc<dyn Backend> = match kind {
        BackendKind::Http => {
            let endpoint = endpoint.as_deref().ok_or_else(|| {
                CliError::config(format!("{name}_endpoint is required for an http backend"))
            })?;
            let mut http = HttpConfig::new(endpoint);
            http.timeout = Duration::from_secs(config.timeout_secs);
            http.backoff_base = Duration::from_millis(config.retry_backoff_ms);
            Arc::new(HttpBackend::new(http))
        }
        BackendKind::Mock => {
            let path = script.as_deref().ok_or_else(|| {
                CliError::config(format!("{name}_mock_script is required for a mock backend"))
            })?;
            Arc::new(MockFile::load(path)?.into_backend(name)?)
        }
    };
    let mut client = LlmClient::new(backend, model.clone()).with_concurrency(config.concurrency);
    if let Some(dir) = &config.cache_dir {
        client = client.with_cache(ResponseCache::open(dir)?);
    }
    Ok(client)
}

pub fn split(config: &RunConfig) -> CliResult<()> {
    let mut run = Run::new("split", config)?;
    let data = run.dataset()?;
    let seed = run.seed("split");
    let s = split_dataset(&data, config.split_ratio, seed)?;
    write_dataset(run.output("train.jsonl"), &s.train)?;
    write_dataset(run.output("test.jsonl"), &s.test)?;
    info!("split into {} train / {} test", s.train.len(), s.test.len());
    run.finish()?;
    Ok(())
}

pub fn export_training(config: &RunConfig) -> CliResult<()> {
    let mut run = Run::new("export-training", config)?;
    let train = run.dataset()?;
    let (sft, dpo) =
        export_training_data(&train, run.output("sft.jsonl"), run.output("dpo.jsonl"))?;
    info!("wrote {sft} SFT and {dpo} DPO records");
    run.finish()?;
    Ok(())
}

/// Selection file name for a strategy; Only-k does not overgenerate, so the
/// route is left out.
pub fn selections_name(config: &RunConfig) -> String {
    match config.strategy {
        Strategy::OnlyK => format!("selections-{}.jsonl", Strategy::OnlyK.as_str()),
        s => format!(
            "selections-{}-{}.jsonl",
            serde_json::to_value(config.route)
                .expect("route serializes")
                .as_str()
                .expect("string"),
            s.as_str()
        ),
    }
}

pub fn generate(config: &RunConfig) -> CliResult<()> {
    let mut run = Run::new("generate", config)?;
    let data = run.dataset()?;
    let generator = client(config, Role::Generator)?;
    let scorer = match config.strategy {
        Strategy::TopK => Some(client(config, Role::Scorer)?),
        _ => None,
    };
    let mut settings = config.generation_settings();
    settings.seed = run.seed("generation");
    let pipeline = PipelineRun {
        generator: &generator,
        scorer: scorer.as_ref().map(|s| s as &dyn distrank::backend::Scorer),
        route: config.route,
        strategy: config.strategy,
        n: config.n,
        k: config.k,
        settings,
    };

    // questions are independent; workers pull indices and results keep input order
    let workers = config.concurrency.min(data.len()).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<distrank::Result<SelectionRecord>>> =
        (0..data.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= data.len() {
                    break;
                }
                let r = pipeline.run(&data[i]);
                done.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let records = slots
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<distrank::Result<Vec<_>>>()?;
    write_jsonl(&run.output(&selections_name(config)), &records)?;
    info!(
        "{} selection records, {} generator calls",
        records.len(),
        generator.backend_calls()
    );
    run.finish()?;
    Ok(())
}

pub fn rank_eval(config: &RunConfig) -> CliResult<()> {
    let mut run = Run::new("rank-eval", config)?;
    let data = run.dataset()?;
    let scorer = client(config, Role::Scorer)?;
    let pairs: Vec<_> = data.iter().flat_map(build_preference_pairs).collect();
    let report = ranking_accuracy(&pairs, &scorer, &config.thresholds)?;
    write_json(&run.output("ranking_accuracy.json"), &report)?;
    info!(
        "ranking accuracy {:?} over {} pairs",
        report.overall, report.total_pairs
    );
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct LabelledReport {
    label: String,
    #[serde(flatten)]
    report: AggregateReport,
}

pub fn evaluate(config: &RunConfig, selections: &[PathBuf]) -> CliResult<()> {
    if selections.is_empty() {
        return Err(CliError::config(
            "evaluate needs at least one --selections file",
        ));
    }
    let mut run = Run::new("evaluate", config)?;
    let data = run.dataset()?;
    let by_id: HashMap<&str, &Mcq> = data.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut rows: Vec<(String, AggregateReport)> = Vec::new();
    for path in selections {
        run.input(path);
        let records = read_selections(path)?;
        let mut groups: BTreeMap<String, Vec<_>> = BTreeMap::new();
        for r in &records {
            let mcq = by_id.get(r.mcq_id.as_str()).ok_or_else(|| {
                CliError::validation(format!("{}: unknown MCQ {}", path.display(), r.mcq_id))
            })?;
            groups
                .entry(r.strategy.as_str().to_string())
                .or_default()
                .push(alignment_scores(&mcq.distractors, &r.chosen)?);
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("selections");
        for (strategy, scores) in groups {
            let label = if stem.ends_with(&strategy) {
                stem.trim_start_matches("selections-").to_string()
            } else {
                format!("{stem}:{strategy}")
            };
            rows.push((label, aggregate(&scores)?));
        }
    }
    let labelled: Vec<LabelledReport> = rows
        .iter()
        .map(|(label, report)| LabelledReport {
            label: label.clone(),
            report: report.clone(),
        })
        .collect();
    write_json(&run.output("report.json"), &labelled)?;
    let table = render_table(&rows);
    std::fs::write(run.output("report.txt"), &table).map_err(|e| CliError::io(e.to_string()))?;
    print!("{table}");
    run.finish()?;
    Ok(())
}

pub fn humaneval_export(config: &RunConfig, selections: &Path) -> CliResult<()> {
    let mut run = Run::new("humaneval-export", config)?;
    let data = run.dataset()?;
    run.input(selections);
    let records = read_selections(selections)?;
    let sample_seed = run.seed("humaneval_sample");
    let mcqs = sample_eval_mcqs(&data, &records, config.eval_items, sample_seed)?;
    let chosen: HashMap<&str, &Vec<String>> = records
        .iter()
        .map(|r| (r.mcq_id.as_str(), &r.chosen))
        .collect();
    let generated: Vec<Vec<String>> = mcqs.iter().map(|m| chosen[m.id.as_str()].clone()).collect();

    let rank_seed = run.seed("rank_shuffle");
    let rank = run.output("rank.csv");
    export_rank_csv(&mcqs, &rank, rank_seed)?;
    run.artifacts.push(answer_key_path(&rank));
    let rate_seed = run.seed("rate_shuffle");
    let rate = run.output("rate.csv");
    export_rate_csv(&mcqs, &generated, &rate, rate_seed)?;
    run.artifacts.push(answer_key_path(&rate));
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct HumanEvalReport {
    ranking: Option<distrank::humaneval::RankAnalysis>,
    rating: Option<distrank::humaneval::RatingAnalysis>,
}

pub struct AnalyzeInputs<'p> {
    pub rank: &'p [PathBuf],
    pub rank_key: Option<&'p Path>,
    pub rate: &'p [PathBuf],
    pub rate_key: Option<&'p Path>,
}

pub fn humaneval_analyze(config: &RunConfig, inputs: AnalyzeInputs<'_>) -> CliResult<()> {
    if inputs.rank.is_empty() && inputs.rate.is_empty() {
        return Err(CliError::config(
            "humaneval-analyze needs --rank or --rate files",
        ));
    }
    let mut run = Run::new("humaneval-analyze", config)?;
    let default_key = |name: &str| answer_key_path(&config.output_dir.join(name));

    let ranking = if inputs.rank.is_empty() {
        None
    } else {
        let data = run.dataset()?;
        let key_path = run.input(
            &inputs
                .rank_key
                .map_or_else(|| default_key("rank.csv"), Path::to_path_buf),
        );
        let per_rater = inputs
            .rank
            .iter()
            .map(|p| import_rank_csv(&run.input(p), &key_path))
            .collect::<distrank::Result<Vec<_>>>()?;
        let items = merge_rank_raters(per_rater)?;
        let gt = rank_ground_truth(&items, &read_answer_key(&key_path)?)?;
        let by_id: HashMap<&str, &Mcq> = data.iter().map(|m| (m.id.as_str(), m)).collect();
        let scorer = client(config, Role::Scorer)?;
        let mut prompts = Vec::new();
        for item in &items {
            let mcq = by_id.get(item.mcq_id.as_str()).ok_or_else(|| {
                CliError::validation(format!(
                    "rank item {}: unknown MCQ {}",
                    item.item_id, item.mcq_id
                ))
            })?;
            for t in &item.distractor_texts {
                prompts.push(render_ranking_prompt(mcq, t)?);
            }
        }
        let scores = score_all(&scorer, &prompts)?;
        let model: HashMap<String, [f64; 3]> = items
            .iter()
            .zip(scores.chunks(3))
            .map(|(item, s)| {
                (
                    item.item_id.clone(),
                    [s[0].logprob_sum, s[1].logprob_sum, s[2].logprob_sum],
                )
            })
            .collect();
        Some(analyze_rankings(&items, &model, &gt)?)
    };

    let rating = if inputs.rate.is_empty() {
        None
    } else {
        let key_path = run.input(
            &inputs
                .rate_key
                .map_or_else(|| default_key("rate.csv"), Path::to_path_buf),
        );
        let per_rater = inputs
            .rate
            .iter()
            .map(|p| import_rate_csv(&run.input(p), &key_path))
            .collect::<distrank::Result<Vec<_>>>()?;
        Some(analyze_ratings(&merge_rate_raters(per_rater)?)?)
    };

    write_json(
        &run.output("humaneval_report.json"),
        &HumanEvalReport { ranking, rating },
    )?;
    run.finish()?;
    Ok(())
}
