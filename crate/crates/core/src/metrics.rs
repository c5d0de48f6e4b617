//! Alignment between generated and human-authored distractor sets, plus the
//! statistics used to analyze teacher judgments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::mcq::{texts_equal, Distractor};

/// Per-question alignment of a generated set with the human set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    /// At least one generated distractor matches a human one.
    pub partial: bool,
    /// Generated and human sets coincide.
    pub exact: bool,
    /// Share of generated distractors that match a human one.
    pub prop: f64,
    /// Share of human selection mass covered by matched human distractors.
    pub wprop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_questions: usize,
    pub partial_pct: f64,
    pub exact_pct: f64,
    pub prop_pct: f64,
    pub wprop_pct: f64,
}

fn dedup_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for t in texts {
        if !out.iter().any(|u| texts_equal(u, t)) {
            out.push(t);
        }
    }
    out
}

pub fn alignment_scores(human: &[Distractor], generated: &[String]) -> Result<AlignmentScores> {
    if human.is_empty() || generated.is_empty() {
        return Err(Error::Precondition(
            "alignment needs non-empty human and generated sets".into(),
        ));
    }
    let total: f64 = human.iter().map(|d| d.selection).sum();
    if total <= 0.0 {
        return Err(Error::Undefined(
            "weighted proportion needs a positive total selection".into(),
        ));
    }
    let matches_human = |g: &str| human.iter().any(|h| texts_equal(&h.text, g));
    let matches_generated = |h: &str| generated.iter().any(|g| texts_equal(h, g));

    let matched_generated = generated.iter().filter(|g| matches_human(g)).count();
    let covered: f64 = human
        .iter()
        .filter(|h| matches_generated(&h.text))
        .map(|h| h.selection)
        .sum();

    let gen_set = dedup_texts(generated.iter().map(String::as_str));
    let human_set = dedup_texts(human.iter().map(|h| h.text.as_str()));
    let exact = gen_set.len() == human_set.len()
        && gen_set.iter().all(|g| matches_human(g))
        && human_set.iter().all(|h| matches_generated(h));

    Ok(AlignmentScores {
        partial: matched_generated > 0,
        exact,
        prop: matched_generated as f64 / generated.len() as f64,
        wprop: covered / total,
    })
}

/// Means over questions, scaled to percentages.
pub fn aggregate(per_question: &[AlignmentScores]) -> Result<AggregateReport> {
    if per_question.is_empty() {
        return Err(Error::Precondition("nothing to aggregate".into()));
    }
    let n = per_question.len() as f64;
    let pct =
        |f: &dyn Fn(&AlignmentScores) -> f64| per_question.iter().map(f).sum::<f64>() / n * 100.0;
    Ok(AggregateReport {
        n_questions: per_question.len(),
        partial_pct: pct(&|s| f64::from(u8::from(s.partial))),
        exact_pct: pct(&|s| f64::from(u8::from(s.exact))),
        prop_pct: pct(&|s| s.prop),
        wprop_pct: pct(&|s| s.wprop),
    })
}

/// Fixed-width table with one row per labelled report.
pub fn render_table(rows: &[(String, AggregateReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>5}\n",
        "Strategy", "Partial", "Exact", "Prop.", "W. Prop.", "N"
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "{label:<width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}  {:>5}\n",
            r.partial_pct, r.exact_pct, r.prop_pct, r.wprop_pct, r.n_questions
        ));
    }
    out
}

/// Kendall's tau-b between two score vectors over the same items.
///
/// Position `i` of each slice is item `i`'s rank (or score) under that
/// ordering. Reduces to tau-a when neither side has ties.
pub fn kendall_tau(rank_a: &[f64], rank_b: &[f64]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(Error::Precondition(format!(
            "rankings cover {} and {} items",
            rank_a.len(),
            rank_b.len()
        )));
    }
    let m = rank_a.len();
    if m < 2 {
        return Err(Error::Precondition(
            "kendall tau needs at least 2 items".into(),
        ));
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_a, mut ties_b) = (0i64, 0i64);
    for i in 0..m {
        for j in (i + 1)..m {
            let da = rank_a[i].total_cmp(&rank_a[j]) as i64;
            let db = rank_b[i].total_cmp(&rank_b[j]) as i64;
            if da == 0 {
                ties_a += 1;
            }
            if db == 0 {
                ties_b += 1;
            }
            match da * db {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let n0 = (m * (m - 1) / 2) as i64;
    let denom = (((n0 - ties_a) * (n0 - ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Undefined("a ranking is entirely tied".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Quadratic weighted kappa between two raters on a `1..=k` scale.
pub fn qwk(ratings_a: &[u32], ratings_b: &[u32], k: u32) -> Result<f64> {
    if ratings_a.len() != ratings_b.len() || ratings_a.is_empty() {
        return Err(Error::Precondition(
            "QWK needs two equal-length, non-empty rating vectors".into(),
        ));
    }
    if k < 2 {
        return Err(Error::Precondition(
            "rating scale needs at least 2 levels".into(),
        ));
    }
    if let Some(r) = ratings_a.iter().chain(ratings_b).find(|&&r| r < 1 || r > k) {
        return Err(Error::Precondition(format!("rating {r} outside 1..={k}")));
    }
    let constant = |v: &[u32]| v.iter().all(|&r| r == v[0]);
    if constant(ratings_a) && constant(ratings_b) {
        return if ratings_a[0] == ratings_b[0] {
            Ok(1.0)
        } else {
            Err(Error::Undefined(
                "both raters constant with different values".into(),
            ))
        };
    }

    let k = k as usize;
    let n = ratings_a.len() as f64;
    let mut observed = vec![vec![0.0; k]; k];
    let (mut hist_a, mut hist_b) = (vec![0.0; k], vec![0.0; k]);
    for (&a, &b) in ratings_a.iter().zip(ratings_b) {
        let (a, b) = (a as usize - 1, b as usize - 1);
        observed[a][b] += 1.0;
        hist_a[a] += 1.0;
        hist_b[b] += 1.0;
    }
    let scale = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            num += w * observed[i][j];
            den += w * hist_a[i] * hist_b[j] / n;
        }
    }
    Ok(1.0 - num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<WelchResult> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::Precondition(
            "each sample needs at least 2 values".into(),
        ));
    }
    let (ma, va) = mean_var(sample_a);
    let (mb, vb) = mean_var(sample_b);
    let (sa, sb) = (va / sample_a.len() as f64, vb / sample_b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(WelchResult {
                t: 0.0,
                df: f64::NAN,
                p: 1.0,
            });
        }
        return Err(Error::Precondition(
            "both samples have zero variance".into(),
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2)
        / (sa.powi(2) / (sample_a.len() as f64 - 1.0) + sb.powi(2) / (sample_b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Undefined(format!("t distribution with df {df}: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchResult { t, df, p })
}
