//! Teacher evaluation tasks.
//!
//! Two offline tasks are exported as CSV for raters:
//!
//! - rank: order the three human-authored distractors of a question by how
//!   often students would pick them (`rank.csv`);
//! - rate: rate six distractors (three human, three generated, shuffled) on
//!   a 1 to 5 likelihood scale (`rate.csv`).
//!
//! Provenance and selection fractions never appear in the rater-facing
//! files; they go to a JSON-lines answer key written next to each CSV.
//! Each rater returns their own filled copy, imported separately and merged
//! with [`merge_rank_raters`] / [`merge_rate_raters`].

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcq::{texts_equal, write_jsonl, Mcq};
use crate::metrics::{kendall_tau, qwk, welch_t_test};
use crate::pipeline::SelectionRecord;
use crate::seed;

pub const RATING_SCALE: u32 = 5;
pub const DEFAULT_EVAL_ITEMS: usize = 20;

const RANK_HEADER: [&str; 11] = [
    "item_id",
    "question",
    "distractor_id_1",
    "distractor_text_1",
    "distractor_id_2",
    "distractor_text_2",
    "distractor_id_3",
    "distractor_text_3",
    "best_id",
    "second_id",
    "third_id",
];
const RATE_HEADER: [&str; 5] = [
    "item_id",
    "question",
    "entry_id",
    "distractor_text",
    "rating",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Human,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankItem {
    pub item_id: String,
    pub mcq_id: String,
    pub question: String,
    pub distractor_ids: [String; 3],
    pub distractor_texts: [String; 3],
    /// One `(best, second, third)` id triple per rater.
    pub answers: Vec<[String; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub entry_id: String,
    pub text: String,
    pub provenance: Provenance,
    /// One rating per rater.
    pub ratings: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateItem {
    pub item_id: String,
    pub mcq_id: String,
    pub question: String,
    pub entries: Vec<RateEntry>,
}

/// One line of an answer-key sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub item_id: String,
    pub mcq_id: String,
    pub id: String,
    pub text: String,
    pub provenance: Provenance,
    pub selection: Option<f64>,
}

/// Sidecar path for a rater-facing CSV: `rank.csv` -> `rank.key.jsonl`.
pub fn answer_key_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.key.jsonl"))
}

pub fn read_answer_key(path: &Path) -> Result<Vec<KeyRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Ground-truth selection fractions per rank item, in distractor-id order.
pub fn rank_ground_truth(
    items: &[RankItem],
    key: &[KeyRecord],
) -> Result<HashMap<String, [f64; 3]>> {
    let lookup: HashMap<(&str, &str), f64> = key
        .iter()
        .filter_map(|k| Some(((k.item_id.as_str(), k.id.as_str()), k.selection?)))
        .collect();
    items
        .iter()
        .map(|item| {
            let mut gt = [0.0; 3];
            for (slot, id) in gt.iter_mut().zip(&item.distractor_ids) {
                *slot = *lookup
                    .get(&(item.item_id.as_str(), id.as_str()))
                    .ok_or_else(|| {
                        Error::Precondition(format!(
                            "answer key lacks item {} distractor {id}",
                            item.item_id
                        ))
                    })?;
            }
            Ok((item.item_id.clone(), gt))
        })
        .collect()
}

/// Uniformly sample `n` test questions whose chosen distractors share no text
/// with the human-authored ones.
pub fn sample_eval_mcqs(
    test: &[Mcq],
    results: &[SelectionRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<Mcq>> {
    let by_id: HashMap<&str, &SelectionRecord> =
        results.iter().map(|r| (r.mcq_id.as_str(), r)).collect();
    let mut eligible = Vec::new();
    for mcq in test {
        let rec = by_id.get(mcq.id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("no selection result for MCQ {}", mcq.id))
        })?;
        let overlaps = rec
            .chosen
            .iter()
            .any(|c| mcq.distractors.iter().any(|d| texts_equal(&d.text, c)));
        if !overlaps {
            eligible.push(mcq);
        }
    }
    if eligible.len() < n {
        return Err(Error::Precondition(format!(
            "only {} eligible MCQs, {n} requested",
            eligible.len()
        )));
    }
    let mut rng = seed::rng(seed);
    Ok(index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `rank.csv` (answers blank) and its answer key. Distractor order is
/// shuffled under `seed`.
pub fn export_rank_csv(mcqs: &[Mcq], path: &Path, seed: u64) -> Result<Vec<RankItem>> {
    if let Some(m) = mcqs.iter().find(|m| m.distractors.len() != 3) {
        return Err(Error::Precondition(format!(
            "MCQ {} has {} human distractors, rank task needs 3",
            m.id,
            m.distractors.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut items = Vec::with_capacity(mcqs.len());
    let mut key = Vec::new();
    for (i, mcq) in mcqs.iter().enumerate() {
        let item_id = (i + 1).to_string();
        let mut order = [0usize, 1, 2];
        order.shuffle(&mut rng);
        let ids: [String; 3] = ["1".into(), "2".into(), "3".into()];
        let texts = order.map(|j| mcq.distractors[j].text.clone());
        for (id, &j) in ids.iter().zip(&order) {
            let d = &mcq.distractors[j];
            key.push(KeyRecord {
                item_id: item_id.clone(),
                mcq_id: mcq.id.clone(),
                id: id.clone(),
                text: d.text.clone(),
                provenance: Provenance::Human,
                selection: Some(d.selection),
            });
        }
        items.push(RankItem {
            item_id,
            mcq_id: mcq.id.clone(),
            question: mcq.stem.clone(),
            distractor_ids: ids,
            distractor_texts: texts,
            answers: Vec::new(),
        });
    }

    let mut w = csv_writer(path)?;
    w.write_record(RANK_HEADER)?;
    for item in &items {
        let mut row = vec![item.item_id.as_str(), item.question.as_str()];
        for (id, text) in item.distractor_ids.iter().zip(&item.distractor_texts) {
            row.push(id);
            row.push(text);
        }
        row.extend(["", "", ""]);
        w.write_record(&row)?;
    }
    flush(w, path)?;
    write_jsonl(answer_key_path(path), &key)?;
    Ok(items)
}

/// Write `rate.csv` (ratings blank) and its answer key. `generated[i]` holds
/// the three generated texts for `mcqs[i]`.
pub fn export_rate_csv(
    mcqs: &[Mcq],
    generated: &[Vec<String>],
    path: &Path,
    seed: u64,
) -> Result<Vec<RateItem>> {
    if mcqs.len() != generated.len() {
        return Err(Error::Precondition(format!(
            "{} MCQs but {} generated sets",
            mcqs.len(),
            generated.len()
        )));
    }
    for (m, g) in mcqs.iter().zip(generated) {
        if m.distractors.len() != 3 || g.len() != 3 {
            return Err(Error::Precondition(format!(
                "MCQ {} needs 3 human and 3 generated distractors",
                m.id
            )));
        }
    }
    let mut rng = seed::rng(seed);
    let mut items = Vec::with_capacity(mcqs.len());
    let mut key = Vec::new();
    for (i, (mcq, gen)) in mcqs.iter().zip(generated).enumerate() {
        let item_id = (i + 1).to_string();
        let mut pool: Vec<(String, Provenance, Option<f64>)> = mcq
            .distractors
            .iter()
            .map(|d| (d.text.clone(), Provenance::Human, Some(d.selection)))
            .chain(gen.iter().map(|t| (t.clone(), Provenance::Generated, None)))
            .collect();
        pool.shuffle(&mut rng);
        let entries: Vec<RateEntry> = pool
            .into_iter()
            .enumerate()
            .map(|(j, (text, provenance, selection))| {
                let entry_id = (j + 1).to_string();
                key.push(KeyRecord {
                    item_id: item_id.clone(),
                    mcq_id: mcq.id.clone(),
                    id: entry_id.clone(),
                    text: text.clone(),
                    provenance,
                    selection,
                });
                RateEntry {
                    entry_id,
                    text,
                    provenance,
                    ratings: Vec::new(),
                }
            })
            .collect();
        items.push(RateItem {
            item_id,
            mcq_id: mcq.id.clone(),
            question: mcq.stem.clone(),
            entries,
        });
    }

    let mut w = csv_writer(path)?;
    w.write_record(RATE_HEADER)?;
    for item in &items {
        for e in &item.entries {
            w.write_record([&item.item_id, &item.question, &e.entry_id, &e.text, ""])?;
        }
    }
    flush(w, path)?;
    write_jsonl(answer_key_path(path), &key)?;
    Ok(items)
}

fn csv_reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {got:?}"),
        });
    }
    Ok(r)
}

fn mcq_ids_by_item(key: &[KeyRecord]) -> HashMap<&str, &str> {
    key.iter()
        .map(|k| (k.item_id.as_str(), k.mcq_id.as_str()))
        .collect()
}

/// Read one rater's `rank.csv`. Blank answer columns give an item without
/// answers; filled ones must be a permutation of the item's ids.
pub fn import_rank_csv(path: &Path, key_path: &Path) -> Result<Vec<RankItem>> {
    let key = read_answer_key(key_path)?;
    let mcq_of = mcq_ids_by_item(&key);
    let mut reader = csv_reader(path, &RANK_HEADER)?;
    let mut items = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |j: usize| row.get(j).unwrap_or("").to_string();
        let item_id = field(0);
        let mcq_id = mcq_of
            .get(item_id.as_str())
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("item {item_id} is not in the answer key"),
            })?
            .to_string();
        let distractor_ids = [field(2), field(4), field(6)];
        let distractor_texts = [field(3), field(5), field(7)];
        let answer = [field(8), field(9), field(10)].map(|s| s.trim().to_string());
        let answers = if answer.iter().all(String::is_empty) {
            Vec::new()
        } else {
            let mut sorted_answer = answer.clone();
            sorted_answer.sort();
            let mut sorted_ids = distractor_ids.clone();
            sorted_ids.sort();
            if sorted_answer != sorted_ids {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "item {item_id}: answer {answer:?} is not a permutation of {distractor_ids:?}"
                    ),
                });
            }
            vec![answer]
        };
        items.push(RankItem {
            item_id,
            mcq_id,
            question: field(1),
            distractor_ids,
            distractor_texts,
            answers,
        });
    }
    Ok(items)
}

/// Read one rater's `rate.csv`, restoring provenance from the answer key.
pub fn import_rate_csv(path: &Path, key_path: &Path) -> Result<Vec<RateItem>> {
    let key = read_answer_key(key_path)?;
    let lookup: HashMap<(&str, &str), &KeyRecord> = key
        .iter()
        .map(|k| ((k.item_id.as_str(), k.id.as_str()), k))
        .collect();
    let mut reader = csv_reader(path, &RATE_HEADER)?;
    let mut items: Vec<RateItem> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |j: usize| row.get(j).unwrap_or("").to_string();
        let (item_id, entry_id) = (field(0), field(2));
        let (provenance, mcq_id) = lookup
            .get(&(item_id.as_str(), entry_id.as_str()))
            .map(|k| (k.provenance, k.mcq_id.clone()))
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("item {item_id} entry {entry_id} is not in the answer key"),
            })?;
        let raw = field(4);
        let ratings = match raw.trim() {
            "" => Vec::new(),
            s => {
                let r: u32 = s.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("rating {s:?} is not an integer"),
                })?;
                if !(1..=RATING_SCALE).contains(&r) {
                    return Err(Error::Parse {
                        line,
                        message: format!("rating {r} outside 1..={RATING_SCALE}"),
                    });
                }
                vec![r]
            }
        };
        let entry = RateEntry {
            entry_id,
            text: field(3),
            provenance,
            ratings,
        };
        match items.last_mut() {
            Some(last) if last.item_id == item_id => last.entries.push(entry),
            _ => items.push(RateItem {
                item_id,
                mcq_id,
                question: field(1),
                entries: vec![entry],
            }),
        }
    }
    Ok(items)
}

/// Combine per-rater imports of the same rank task.
pub fn merge_rank_raters(per_rater: Vec<Vec<RankItem>>) -> Result<Vec<RankItem>> {
    let mut iter = per_rater.into_iter();
    let mut merged = iter.next().unwrap_or_default();
    for other in iter {
        if other.len() != merged.len() {
            return Err(Error::Precondition(
                "rater files cover different items".into(),
            ));
        }
        for (m, o) in merged.iter_mut().zip(other) {
            if m.item_id != o.item_id || m.distractor_ids != o.distractor_ids {
                return Err(Error::Precondition(format!(
                    "rater files disagree on item {}",
                    m.item_id
                )));
            }
            m.answers.extend(o.answers);
        }
    }
    Ok(merged)
}

/// Combine per-rater imports of the same rate task.
pub fn merge_rate_raters(per_rater: Vec<Vec<RateItem>>) -> Result<Vec<RateItem>> {
    let mut iter = per_rater.into_iter();
    let mut merged = iter.next().unwrap_or_default();
    for other in iter {
        if other.len() != merged.len() {
            return Err(Error::Precondition(
                "rater files cover different items".into(),
            ));
        }
        for (m, o) in merged.iter_mut().zip(other) {
            if m.item_id != o.item_id || m.entries.len() != o.entries.len() {
                return Err(Error::Precondition(format!(
                    "rater files disagree on item {}",
                    m.item_id
                )));
            }
            for (me, oe) in m.entries.iter_mut().zip(o.entries) {
                if me.entry_id != oe.entry_id {
                    return Err(Error::Precondition(format!(
                        "rater files disagree on item {}",
                        m.item_id
                    )));
                }
                me.ratings.extend(oe.ratings);
            }
        }
    }
    Ok(merged)
}

/// Mean Kendall tau for each pairing of ground truth, teachers, and model.
///
/// `None` when no item yields a defined tau (e.g. all ground-truth ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAnalysis {
    pub gt_vs_human: Option<f64>,
    pub gt_vs_model: Option<f64>,
    pub human_vs_model: Option<f64>,
    pub n_items: usize,
}

/// Scores where a larger value means ranked higher: best=3, second=2, third=1.
fn answer_scores(item: &RankItem, answer: &[String; 3]) -> [f64; 3] {
    item.distractor_ids.clone().map(|id| {
        let pos = answer
            .iter()
            .position(|a| *a == id)
            .expect("validated permutation");
        (3 - pos) as f64
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn defined_tau(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    match kendall_tau(a, b) {
        Ok(t) => Ok(Some(t)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Compare ground-truth, teacher, and model rankings of the rank items.
///
/// Each rater is compared individually; per item the raters' taus are
/// averaged, then items are averaged.
pub fn analyze_rankings(
    items: &[RankItem],
    model_scores: &HashMap<String, [f64; 3]>,
    gt: &HashMap<String, [f64; 3]>,
) -> Result<RankAnalysis> {
    let missing: Vec<&str> = items
        .iter()
        .filter(|i| i.answers.is_empty())
        .map(|i| i.item_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "missing rank answers for items {}",
            missing.join(", ")
        )));
    }
    let (mut gh, mut gm, mut hm) = (Vec::new(), Vec::new(), Vec::new());
    for item in items {
        let model = model_scores.get(&item.item_id).ok_or_else(|| {
            Error::Precondition(format!("no model scores for item {}", item.item_id))
        })?;
        let truth = gt.get(&item.item_id).ok_or_else(|| {
            Error::Precondition(format!("no ground truth for item {}", item.item_id))
        })?;
        if let Some(t) = defined_tau(truth, model)? {
            gm.push(t);
        }
        let (mut per_gh, mut per_hm) = (Vec::new(), Vec::new());
        for answer in &item.answers {
            let human = answer_scores(item, answer);
            per_gh.extend(defined_tau(truth, &human)?);
            per_hm.extend(defined_tau(&human, model)?);
        }
        gh.extend(mean(&per_gh));
        hm.extend(mean(&per_hm));
    }
    Ok(RankAnalysis {
        gt_vs_human: mean(&gh),
        gt_vs_model: mean(&gm),
        human_vs_model: mean(&hm),
        n_items: items.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceStats {
    pub qwk: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    pub n_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadToHead {
    pub win_pct: f64,
    pub tie_pct: f64,
    pub loss_pct: f64,
    pub comparisons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAnalysis {
    pub generated: ProvenanceStats,
    pub human: ProvenanceStats,
    /// Welch t-test, generated minus human. `None` when both groups have
    /// zero variance.
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub head_to_head: HeadToHead,
}

fn provenance_stats(
    items: &[RateItem],
    provenance: Provenance,
) -> Result<(ProvenanceStats, Vec<f64>)> {
    let entries: Vec<&RateEntry> = items
        .iter()
        .flat_map(|i| &i.entries)
        .filter(|e| e.provenance == provenance)
        .collect();
    let a: Vec<u32> = entries.iter().map(|e| e.ratings[0]).collect();
    let b: Vec<u32> = entries.iter().map(|e| e.ratings[1]).collect();
    let qwk = match qwk(&a, &b, RATING_SCALE) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let averages: Vec<f64> = entries
        .iter()
        .map(|e| f64::from(e.ratings[0] + e.ratings[1]) / 2.0)
        .collect();
    let n = averages.len() as f64;
    let mean = averages.iter().sum::<f64>() / n;
    let sd = if averages.len() > 1 {
        (averages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((
        ProvenanceStats {
            qwk,
            mean,
            sd,
            n_entries: entries.len(),
        },
        averages,
    ))
}

/// Agreement, means, significance, and head-to-head outcome of generated vs
/// human distractors. Requires exactly two raters on every entry.
pub fn analyze_ratings(items: &[RateItem]) -> Result<RatingAnalysis> {
    if items.is_empty() {
        return Err(Error::Precondition("no rate items".into()));
    }
    let mut missing = Vec::new();
    for item in items {
        for e in &item.entries {
            if e.ratings.len() != 2 {
                missing.push(format!(
                    "{}/{} ({} ratings)",
                    item.item_id,
                    e.entry_id,
                    e.ratings.len()
                ));
            }
        }
        let gen = item
            .entries
            .iter()
            .filter(|e| e.provenance == Provenance::Generated)
            .count();
        if gen != 3 || item.entries.len() != 6 {
            return Err(Error::Precondition(format!(
                "item {} must have 3 human and 3 generated entries",
                item.item_id
            )));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "entries without exactly two ratings: {}",
            missing.join(", ")
        )));
    }

    let (generated, gen_avgs) = provenance_stats(items, Provenance::Generated)?;
    let (human, human_avgs) = provenance_stats(items, Provenance::Human)?;
    let welch = match welch_t_test(&gen_avgs, &human_avgs) {
        Ok(w) => Some(w),
        Err(Error::Precondition(_)) => None,
        Err(e) => return Err(e),
    };

    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for item in items {
        let avg = |p: Provenance| -> Vec<f64> {
            item.entries
                .iter()
                .filter(|e| e.provenance == p)
                .map(|e| f64::from(e.ratings[0] + e.ratings[1]) / 2.0)
                .collect()
        };
        let (g, h) = (avg(Provenance::Generated), avg(Provenance::Human));
        for gv in &g {
            for hv in &h {
                let outcome = match gv.total_cmp(hv) {
                    std::cmp::Ordering::Greater => "win",
                    std::cmp::Ordering::Equal => "tie",
                    std::cmp::Ordering::Less => "loss",
                };
                *tally.entry(outcome).or_default() += 1;
            }
        }
    }
    let comparisons: usize = tally.values().sum();
    let pct = |k: &str| 100.0 * *tally.get(k).unwrap_or(&0) as f64 / comparisons as f64;
    Ok(RatingAnalysis {
        generated,
        human,
        t: welch.map(|w| w.t),
        p: welch.map(|w| w.p),
        head_to_head: HeadToHead {
            win_pct: pct("win"),
            tie_pct: pct("tie"),
            loss_pct: pct("loss"),
            comparisons,
        },
    })
}
