//! Pairwise preferences read off student selection fractions.
//!
//! Within a question, the distractor more students picked is preferred. The
//! same pairs feed DPO training data and the ranking-accuracy evaluation of
//! any [`Scorer`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{score_all, Scorer};
use crate::error::{Error, Result};
use crate::mcq::{texts_equal, write_jsonl, Mcq};
use crate::prompt::{ranking_context, ScoringPrompt};

/// Margin cuts reported by default: all pairs, and pairs more than ten
/// percentage points apart.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.0, 0.10];
/// DPO temperature used for the ranking model.
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub mcq_id: String,
    pub context: String,
    pub chosen: String,
    pub rejected: String,
    /// `p_chosen - p_rejected`, always positive.
    pub margin: f64,
}

impl PreferencePair {
    pub fn chosen_prompt(&self) -> ScoringPrompt {
        ScoringPrompt {
            context: self.context.clone(),
            continuation: self.chosen.clone(),
        }
    }

    pub fn rejected_prompt(&self) -> ScoringPrompt {
        ScoringPrompt {
            context: self.context.clone(),
            continuation: self.rejected.clone(),
        }
    }
}

/// One pair per unordered distractor pair with unequal selections, oriented
/// toward the more-selected one. Tied pairs are omitted.
pub fn build_preference_pairs(mcq: &Mcq) -> Vec<PreferencePair> {
    let context = ranking_context(mcq);
    let d = &mcq.distractors;
    let mut out = Vec::new();
    for i in 0..d.len() {
        for j in (i + 1)..d.len() {
            let (a, b) = (&d[i], &d[j]);
            if a.selection == b.selection || texts_equal(&a.text, &b.text) {
                continue;
            }
            let (hi, lo) = if a.selection > b.selection {
                (a, b)
            } else {
                (b, a)
            };
            out.push(PreferencePair {
                mcq_id: mcq.id.clone(),
                context: context.clone(),
                chosen: hi.text.clone(),
                rejected: lo.text.clone(),
                margin: hi.selection - lo.selection,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    /// Pairs with margin strictly greater than this are included.
    pub threshold: f64,
    /// `None` when no pair clears the threshold.
    pub accuracy: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingAccuracyReport {
    pub overall: f64,
    pub total_pairs: usize,
    pub by_margin_threshold: Vec<ThresholdAccuracy>,
}

impl RankingAccuracyReport {
    pub fn at(&self, threshold: f64) -> Option<&ThresholdAccuracy> {
        self.by_margin_threshold
            .iter()
            .find(|t| t.threshold == threshold)
    }
}

/// Which pairs the scorer orders correctly. Score ties count as wrong.
pub fn pair_correctness<S: Scorer + ?Sized>(
    pairs: &[PreferencePair],
    scorer: &S,
) -> Result<Vec<bool>> {
    let mut index: HashMap<ScoringPrompt, usize> = HashMap::new();
    let mut prompts = Vec::new();
    let mut slot = |p: ScoringPrompt| {
        *index.entry(p.clone()).or_insert_with(|| {
            prompts.push(p);
            prompts.len() - 1
        })
    };
    let slots: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (slot(p.chosen_prompt()), slot(p.rejected_prompt())))
        .collect();
    let scores = score_all(scorer, &prompts)?;
    Ok(slots
        .into_iter()
        .map(|(c, r)| scores[c].logprob_sum > scores[r].logprob_sum)
        .collect())
}

/// Fraction of pairs where the scorer prefers the distractor students chose
/// more often, overall and restricted to margins above each threshold.
pub fn ranking_accuracy<S: Scorer + ?Sized>(
    pairs: &[PreferencePair],
    scorer: &S,
    thresholds: &[f64],
) -> Result<RankingAccuracyReport> {
    if pairs.is_empty() {
        return Err(Error::Precondition(
            "no preference pairs to evaluate".into(),
        ));
    }
    let correct = pair_correctness(pairs, scorer)?;
    let fraction = |keep: &dyn Fn(&PreferencePair) -> bool| -> (Option<f64>, usize) {
        let (hits, total) = pairs
            .iter()
            .zip(&correct)
            .filter(|(p, _)| keep(p))
            .fold((0usize, 0usize), |(h, t), (_, &ok)| {
                (h + usize::from(ok), t + 1)
            });
        ((total > 0).then(|| hits as f64 / total as f64), total)
    };
    let (overall, total_pairs) = fraction(&|_| true);
    let by_margin_threshold = thresholds
        .iter()
        .map(|&t| {
            let (accuracy, pairs) = fraction(&|p| p.margin > t);
            ThresholdAccuracy {
                threshold: t,
                accuracy,
                pairs,
            }
        })
        .collect();
    Ok(RankingAccuracyReport {
        overall: overall.expect("pairs is non-empty"),
        total_pairs,
        by_margin_threshold,
    })
}

/// DPO loss for one pair: `-ln sigmoid(beta * m)` with
/// `m = (policy_chosen - ref_chosen) - (policy_rejected - ref_rejected)`.
pub fn dpo_pair_loss(
    policy_chosen_lp: f64,
    policy_rejected_lp: f64,
    ref_chosen_lp: f64,
    ref_rejected_lp: f64,
    beta: f64,
) -> Result<f64> {
    let inputs = [
        policy_chosen_lp,
        policy_rejected_lp,
        ref_chosen_lp,
        ref_rejected_lp,
        beta,
    ];
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("DPO loss inputs must be finite".into()));
    }
    if beta <= 0.0 {
        return Err(Error::Precondition(format!("beta {beta} must be positive")));
    }
    let margin = (policy_chosen_lp - ref_chosen_lp) - (policy_rejected_lp - ref_rejected_lp);
    Ok(neg_log_sigmoid(beta * margin))
}

/// `-ln sigmoid(x) = ln(1 + e^-x)`, stable for large `|x|`.
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Serialize)]
struct SftRecord<'a> {
    prompt: &'a str,
    completion: &'a str,
}

#[derive(Debug, Serialize)]
struct DpoRecord<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
    margin: f64,
}

/// Write SFT (every train distractor as a completion) and DPO (every
/// preference pair) JSON-lines files. Returns `(sft_count, dpo_count)`.
pub fn export_training_data(
    train: &[Mcq],
    sft_path: impl AsRef<Path>,
    dpo_path: impl AsRef<Path>,
) -> Result<(usize, usize)> {
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let contexts: Vec<String> = train.iter().map(ranking_context).collect();
    let sft: Vec<SftRecord> = train
        .iter()
        .zip(&contexts)
        .flat_map(|(m, ctx)| {
            m.distractors.iter().map(move |d| SftRecord {
                prompt: ctx,
                completion: &d.text,
            })
        })
        .collect();
    let pairs: Vec<PreferencePair> = train.iter().flat_map(build_preference_pairs).collect();
    let dpo: Vec<DpoRecord> = pairs
        .iter()
        .map(|p| DpoRecord {
            prompt: &p.context,
            chosen: &p.chosen,
            rejected: &p.rejected,
            margin: p.margin,
        })
        .collect();
    write_jsonl(sft_path, &sft)?;
    write_jsonl(dpo_path, &dpo)?;
    Ok((sft.len(), dpo.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScoreResult;
    use crate::mcq::fixtures::subtraction;
    use crate::mcq::Distractor;
    use proptest::prelude::*;

    fn with_selections(sel: &[f64]) -> Mcq {
        let mut m = subtraction();
        m.key_selection = 0.0;
        m.distractors = sel
            .iter()
            .enumerate()
            .map(|(i, &s)| Distractor::new(format!("d{i}"), "", s))
            .collect();
        m
    }

    #[test]
    fn three_distinct_selections_give_three_pairs() {
        let pairs = build_preference_pairs(&with_selections(&[0.30, 0.15, 0.05]));
        let mut margins: Vec<f64> = pairs.iter().map(|p| p.margin).collect();
        margins.sort_by(f64::total_cmp);
        // C(3,2) differences: .30-.15, .30-.05, .15-.05
        let want = [0.10, 0.15, 0.25];
        assert_eq!(margins.len(), 3);
        for (g, w) in margins.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        let top = pairs
            .iter()
            .find(|p| p.rejected == "d2" && p.chosen == "d0")
            .unwrap();
        assert!((top.margin - 0.25).abs() < 1e-12);
        assert!(pairs.iter().all(|p| p.context.ends_with("Distractor: ")));
    }

    #[test]
    fn tied_pair_is_omitted() {
        assert_eq!(
            build_preference_pairs(&with_selections(&[0.20, 0.20, 0.10])).len(),
            2
        );
        assert_eq!(
            build_preference_pairs(&with_selections(&[0.20, 0.10])).len(),
            1
        );
    }

    fn selection_scorer(sign: f64) -> impl Fn(&ScoringPrompt) -> Result<ScoreResult> + Sync {
        let m = with_selections(&[0.30, 0.15, 0.05, 0.40]);
        move |p: &ScoringPrompt| {
            let s = m
                .distractors
                .iter()
                .find(|d| d.text == p.continuation)
                .unwrap()
                .selection;
            ScoreResult::new(sign * s - 1.0, 1)
        }
    }

    #[test]
    fn oracle_and_anti_oracle() {
        let pairs = build_preference_pairs(&with_selections(&[0.30, 0.15, 0.05, 0.40]));
        let r = ranking_accuracy(&pairs, &selection_scorer(1.0), &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.overall, 1.0);
        let r = ranking_accuracy(&pairs, &selection_scorer(-1.0), &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.overall, 0.0);
    }

    #[test]
    fn constant_scorer_scores_zero() {
        let pairs = build_preference_pairs(&with_selections(&[0.30, 0.15, 0.05]));
        let r = ranking_accuracy(
            &pairs,
            &|_: &ScoringPrompt| ScoreResult::new(-2.0, 1),
            &[0.0],
        )
        .unwrap();
        assert_eq!(r.overall, 0.0);
    }

    #[test]
    fn threshold_counts_and_undefined_marker() {
        let pairs = build_preference_pairs(&with_selections(&[0.30, 0.15, 0.05]));
        let r = ranking_accuracy(&pairs, &selection_scorer(1.0), &[0.0, 0.12, 0.5]).unwrap();
        assert_eq!(r.at(0.0).unwrap().pairs, 3);
        assert_eq!(r.at(0.12).unwrap().pairs, 2);
        assert_eq!(r.at(0.5).unwrap().pairs, 0);
        assert_eq!(r.at(0.5).unwrap().accuracy, None);
        assert!(ranking_accuracy(&[], &selection_scorer(1.0), &[0.0]).is_err());
    }

    #[test]
    fn dpo_loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((dpo_pair_loss(-3.0, -4.0, -3.0, -4.0, 0.5).unwrap() - ln2).abs() < 1e-12);
        // m = 2, beta = 0.5: -ln sigmoid(1) = ln(1 + e^-1)
        let want = (1.0 + (-1.0f64).exp()).ln();
        let got = dpo_pair_loss(-2.0, -6.0, -3.0, -5.0, 0.5).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.313262).abs() < 1e-6);
        assert!(dpo_pair_loss(0.0, -1e6, 0.0, 0.0, 0.5).unwrap() < 1e-12);
        assert!(dpo_pair_loss(-1e6, 0.0, 0.0, 0.0, 0.5).unwrap().is_finite());
        assert!(dpo_pair_loss(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(dpo_pair_loss(f64::NAN, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn export_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (sft, dpo) = (dir.path().join("sft.jsonl"), dir.path().join("dpo.jsonl"));
        let mut b = subtraction();
        b.id = "q2".into();
        assert_eq!(
            export_training_data(&[subtraction(), b], &sft, &dpo).unwrap(),
            (6, 6)
        );
        let lines = std::fs::read_to_string(&dpo).unwrap();
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first["chosen"], "22,000");
        assert!(first["prompt"].as_str().unwrap().ends_with("Distractor: "));

        let tied = with_selections(&[0.2, 0.2, 0.1]);
        assert_eq!(export_training_data(&[tied], &sft, &dpo).unwrap(), (3, 2));
        assert!(matches!(
            export_training_data(&[], &sft, &dpo),
            Err(Error::Precondition(_))
        ));
    }

    proptest! {
        #[test]
        fn swapping_flips_correctness(a in -10.0f64..0.0, b in -10.0f64..0.0) {
            prop_assume!(a != b);
            let pair = PreferencePair {
                mcq_id: "q".into(), context: "c Distractor: ".into(),
                chosen: "x".into(), rejected: "y".into(), margin: 0.1,
            };
            let swapped = PreferencePair { chosen: "y".into(), rejected: "x".into(), ..pair.clone() };
            let scorer = move |p: &ScoringPrompt| ScoreResult::new(if p.continuation == "x" { a } else { b }, 1);
            let c1 = pair_correctness(&[pair], &scorer).unwrap()[0];
            let c2 = pair_correctness(&[swapped], &scorer).unwrap()[0];
            prop_assert_ne!(c1, c2);
        }

        #[test]
        fn dpo_loss_decreases_in_margin(m in -20.0f64..20.0, d in 0.01f64..5.0) {
            let lo = dpo_pair_loss(m, 0.0, 0.0, 0.0, 0.5).unwrap();
            let hi = dpo_pair_loss(m + d, 0.0, 0.0, 0.0, 0.5).unwrap();
            prop_assert!(hi < lo);
            prop_assert!(lo >= 0.0);
        }

        #[test]
        fn dpo_loss_is_convex_about_zero(m in -30.0f64..30.0, beta in 0.05f64..4.0) {
            let sum = dpo_pair_loss(m, 0.0, 0.0, 0.0, beta).unwrap()
                + dpo_pair_loss(-m, 0.0, 0.0, 0.0, beta).unwrap();
            prop_assert!(sum >= 2.0 * std::f64::consts::LN_2 - 1e-12);
            if m.abs() > 1e-3 {
                prop_assert!(sum > 2.0 * std::f64::consts::LN_2);
            }
        }

        #[test]
        fn dpo_beta_scales_the_margin(m in -30.0f64..30.0, beta in 0.05f64..4.0) {
            let scaled = dpo_pair_loss(m, 0.0, 0.0, 0.0, beta).unwrap();
            let unit = dpo_pair_loss(beta * m, 0.0, 0.0, 0.0, 1.0).unwrap();
            prop_assert!((scaled - unit).abs() < 1e-12);
        }

        #[test]
        fn higher_thresholds_use_fewer_pairs(
            sel in prop::collection::vec(0u32..20, 2..6),
            t1 in 0.0f64..0.5,
            dt in 0.0f64..0.5,
        ) {
            let m = with_selections(&sel.iter().map(|&s| f64::from(s) / 40.0).collect::<Vec<_>>());
            let pairs = build_preference_pairs(&m);
            prop_assume!(!pairs.is_empty());
            let scorer = |p: &ScoringPrompt| ScoreResult::new(-(p.continuation.len() as f64), 1);
            let r = ranking_accuracy(&pairs, &scorer, &[t1, t1 + dt]).unwrap();
            let (a, b) = (&r.by_margin_threshold[0], &r.by_margin_threshold[1]);
            prop_assert!(b.pairs <= a.pairs);
            prop_assert_eq!(a.pairs, pairs.iter().filter(|p| p.margin > t1).count());
        }
    }
}
