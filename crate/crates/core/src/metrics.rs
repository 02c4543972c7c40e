//! Evaluation: top-1/top-5 verb, noun, and (verb, noun) action accuracy,
//! per-kitchen breakdowns, and ensemble disagreement.
//!
//! Ranking is purely ordinal (ties resolve to the lower class index), so
//! every metric is invariant under strictly monotone transforms of each
//! probability row.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-1/top-5 pair for one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Verb/noun/action accuracy over one set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub verb: HeadAccuracy,
    pub noun: HeadAccuracy,
    pub action: HeadAccuracy,
    pub n_samples: usize,
}

/// Full evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: AccuracyTable,
    /// Per-kitchen tables, present when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_kitchen: Option<BTreeMap<usize, AccuracyTable>>,
    /// Fraction of samples where ensemble members disagree on the top-1
    /// class (verb and noun averaged); only defined for 2+ backbones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disagreement: Option<f64>,
}

impl EvalReport {
    /// CSV in the usual leaderboard column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "verb_top1,noun_top1,action_top1,verb_top5,noun_top5,action_top5,n_samples\n",
        );
        let t = &self.overall;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.verb.top1, t.noun.top1, t.action.top1, t.verb.top5, t.noun.top5, t.action.top5, t.n_samples
        ));
        out
    }
}

/// Rank of `label` within one probability row: the number of classes that
/// outrank it (strictly higher probability, or equal probability at a
/// lower index).
fn rank_of(row: &[f64], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &p)| p > target || (p == target && j < label))
        .count()
}

fn check_rows(op: &'static str, probs: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if probs.len() != labels.len() {
        return Err(Error::shape(
            op,
            format!("{} rows vs {} labels", probs.len(), labels.len()),
        ));
    }
    if probs.is_empty() {
        return Err(Error::arg(op, "empty batch"));
    }
    let c = probs[0].len();
    if probs.iter().any(|r| r.len() != c) {
        return Err(Error::shape(op, "ragged probability rows".to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg(op, format!("label {bad} out of range for {c} classes")));
    }
    Ok(c)
}

/// Fraction of samples whose true class is among the `k` highest-ranked
/// classes.
pub fn topk(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let c = check_rows("topk", probs, labels)?;
    if k == 0 || k > c {
        return Err(Error::arg("topk", format!("k={k} outside 1..={c}")));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &l)| rank_of(row, l) < k)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Joint (verb, noun) accuracy. Top-1 requires both heads correct; for
/// k > 1 candidate actions are ranked by the product of the head
/// probabilities (ties by lower verb then noun index) and the true pair
/// must appear among the best `k`.
pub fn action_topk(
    verb_probs: &[Vec<f64>],
    noun_probs: &[Vec<f64>],
    verb_labels: &[usize],
    noun_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let cv = check_rows("action_topk", verb_probs, verb_labels)?;
    let cn = check_rows("action_topk", noun_probs, noun_labels)?;
    if verb_probs.len() != noun_probs.len() {
        return Err(Error::shape(
            "action_topk",
            format!("{} verb rows vs {} noun rows", verb_probs.len(), noun_probs.len()),
        ));
    }
    if k == 0 {
        return Err(Error::arg("action_topk", "k must be >= 1"));
    }

    let n = verb_probs.len();
    let mut hits = 0usize;
    for i in 0..n {
        if k == 1 {
            if rank_of(&verb_probs[i], verb_labels[i]) == 0 && rank_of(&noun_probs[i], noun_labels[i]) == 0
            {
                hits += 1;
            }
            continue;
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(cv * cn);
        for v in 0..cv {
            for m in 0..cn {
                pairs.push((verb_probs[i][v] * noun_probs[i][m], v, m));
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        if pairs
            .iter()
            .take(k)
            .any(|&(_, v, m)| v == verb_labels[i] && m == noun_labels[i])
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Fraction of samples on which not all backbones pick the same top-1
/// class. `preds[b][i]` is backbone `b`'s predicted class for sample `i`.
pub fn disagreement(preds: &[Vec<usize>]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::arg("disagreement", "need at least 2 backbones"));
    }
    let n = preds[0].len();
    if preds.iter().any(|p| p.len() != n) {
        return Err(Error::shape("disagreement", "prediction lengths differ".to_string()));
    }
    if n == 0 {
        return Err(Error::arg("disagreement", "empty predictions"));
    }
    let disagree = (0..n)
        .filter(|&i| preds[1..].iter().any(|p| p[i] != preds[0][i]))
        .count();
    Ok(disagree as f64 / n as f64)
}

/// Verb/noun disagreement averaged.
pub fn disagreement_dual(verb_preds: &[Vec<usize>], noun_preds: &[Vec<usize>]) -> Result<f64> {
    Ok((disagreement(verb_preds)? + disagreement(noun_preds)?) / 2.0)
}

fn accuracy_table(
    verb_probs: &[Vec<f64>],
    noun_probs: &[Vec<f64>],
    verb_labels: &[usize],
    noun_labels: &[usize],
) -> Result<AccuracyTable> {
    let cv = verb_probs[0].len();
    let cn = noun_probs[0].len();
    let k5v = 5.min(cv);
    let k5n = 5.min(cn);
    Ok(AccuracyTable {
        verb: HeadAccuracy {
            top1: topk(verb_probs, verb_labels, 1)?,
            top5: topk(verb_probs, verb_labels, k5v)?,
        },
        noun: HeadAccuracy {
            top1: topk(noun_probs, noun_labels, 1)?,
            top5: topk(noun_probs, noun_labels, k5n)?,
        },
        action: HeadAccuracy {
            top1: action_topk(verb_probs, noun_probs, verb_labels, noun_labels, 1)?,
            top5: action_topk(verb_probs, noun_probs, verb_labels, noun_labels, 5)?,
        },
        n_samples: verb_labels.len(),
    })
}

/// Assemble the full report; `kitchens[i]` is each sample's kitchen id.
/// `per_backbone_preds`, when given as `(verb, noun)` prediction matrices,
/// adds the disagreement figure.
pub fn build_report(
    verb_probs: &[Vec<f64>],
    noun_probs: &[Vec<f64>],
    verb_labels: &[usize],
    noun_labels: &[usize],
    kitchens: &[usize],
    per_kitchen: bool,
    per_backbone_preds: Option<(&[Vec<usize>], &[Vec<usize>])>,
) -> Result<EvalReport> {
    let overall = accuracy_table(verb_probs, noun_probs, verb_labels, noun_labels)?;
    if kitchens.len() != verb_labels.len() {
        return Err(Error::shape(
            "build_report",
            format!("{} kitchen ids vs {} samples", kitchens.len(), verb_labels.len()),
        ));
    }

    let per_kitchen = if per_kitchen {
        let mut tables = BTreeMap::new();
        let mut ids: Vec<usize> = kitchens.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for k in ids {
            let idx: Vec<usize> =
                (0..kitchens.len()).filter(|&i| kitchens[i] == k).collect();
            let pick_probs =
                |rows: &[Vec<f64>]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
            let pick_labels = |l: &[usize]| idx.iter().map(|&i| l[i]).collect::<Vec<_>>();
            tables.insert(
                k,
                accuracy_table(
                    &pick_probs(verb_probs),
                    &pick_probs(noun_probs),
                    &pick_labels(verb_labels),
                    &pick_labels(noun_labels),
                )?,
            );
        }
        Some(tables)
    } else {
        None
    };

    let disagreement = match per_backbone_preds {
        Some((verb, noun)) if verb.len() >= 2 => Some(disagreement_dual(verb, noun)?),
        _ => None,
    };

    Ok(EvalReport {
        overall,
        per_kitchen,
        disagreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_basic_cases() {
        assert_eq!(topk(&[vec![0.6, 0.4]], &[0], 1).unwrap(), 1.0);
        assert_eq!(topk(&[vec![0.4, 0.6]], &[0], 1).unwrap(), 0.0);
        // k = C is always a hit.
        assert_eq!(topk(&[vec![0.1, 0.2, 0.7]], &[0], 3).unwrap(), 1.0);
    }

    #[test]
    fn topk_tie_prefers_lower_index() {
        // Class 0 and 1 tie; rank(0) = 0, rank(1) = 1.
        assert_eq!(topk(&[vec![0.5, 0.5]], &[0], 1).unwrap(), 1.0);
        assert_eq!(topk(&[vec![0.5, 0.5]], &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn topk_validates_inputs() {
        assert!(topk(&[vec![0.5, 0.5]], &[2], 1).is_err());
        assert!(topk(&[vec![0.5, 0.5]], &[0], 0).is_err());
        assert!(topk(&[vec![0.5, 0.5]], &[0], 3).is_err());
        assert!(topk(&[], &[], 1).is_err());
    }

    #[test]
    fn topk_is_rank_based() {
        // A strictly monotone transform (here: cube) must not change it.
        let probs = vec![vec![0.2, 0.5, 0.3], vec![0.7, 0.1, 0.2]];
        let cubed: Vec<Vec<f64>> =
            probs.iter().map(|r| r.iter().map(|p: &f64| p.powi(3)).collect()).collect();
        for k in 1..=3 {
            assert_eq!(
                topk(&probs, &[1, 2], k).unwrap(),
                topk(&cubed, &[1, 2], k).unwrap()
            );
        }
    }

    #[test]
    fn action_top1_is_a_conjunction() {
        let verb = vec![vec![0.9, 0.1]];
        let noun = vec![vec![0.2, 0.8]];
        // Verb correct, noun wrong.
        assert_eq!(action_topk(&verb, &noun, &[0], &[0], 1).unwrap(), 0.0);
        // Both correct.
        assert_eq!(action_topk(&verb, &noun, &[0], &[1], 1).unwrap(), 1.0);
    }

    #[test]
    fn action_top5_covers_all_pairs_when_small() {
        // 2x2 grid has 4 actions, so top-5 always hits.
        let verb = vec![vec![0.5, 0.5]];
        let noun = vec![vec![0.5, 0.5]];
        assert_eq!(action_topk(&verb, &noun, &[1], &[1], 5).unwrap(), 1.0);
    }

    #[test]
    fn action_topk_ranks_by_product() {
        let verb = vec![vec![0.6, 0.4]];
        let noun = vec![vec![0.55, 0.45]];
        // Products: (0,0)=.33, (0,1)=.27, (1,0)=.22, (1,1)=.18.
        assert_eq!(action_topk(&verb, &noun, &[0], &[1], 2).unwrap(), 1.0);
        assert_eq!(action_topk(&verb, &noun, &[1], &[0], 2).unwrap(), 0.0);
        assert_eq!(action_topk(&verb, &noun, &[1], &[0], 3).unwrap(), 1.0);
    }

    #[test]
    fn action_topk_length_mismatch() {
        let verb = vec![vec![0.5, 0.5]];
        assert!(action_topk(&verb, &[], &[0], &[], 1).is_err());
    }

    #[test]
    fn disagreement_cases() {
        assert_eq!(disagreement(&[vec![0, 1], vec![0, 1]]).unwrap(), 0.0);
        assert_eq!(disagreement(&[vec![0, 1], vec![1, 1]]).unwrap(), 0.5);
        assert_eq!(disagreement(&[vec![0, 0], vec![1, 1]]).unwrap(), 1.0);
        assert!(disagreement(&[vec![0, 1]]).is_err());
    }

    #[test]
    fn report_invariants_hold() {
        let verb = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.25, 0.5, 0.25],
        ];
        let noun = vec![
            vec![0.6, 0.4],
            vec![0.5, 0.5],
            vec![0.1, 0.9],
            vec![0.8, 0.2],
        ];
        let vl = [0, 1, 2, 0];
        let nl = [0, 1, 1, 1];
        let kitchens = [0, 0, 1, 1];
        let r = build_report(&verb, &noun, &vl, &nl, &kitchens, true, None).unwrap();
        let t = &r.overall;
        assert!(t.verb.top1 <= t.verb.top5);
        assert!(t.noun.top1 <= t.noun.top5);
        assert!(t.action.top1 <= t.verb.top1.min(t.noun.top1));

        // Count-weighted per-kitchen accuracies reproduce the overall ones.
        let tables = r.per_kitchen.as_ref().unwrap();
        let total: usize = tables.values().map(|t| t.n_samples).sum();
        assert_eq!(total, 4);
        let weighted: f64 = tables
            .values()
            .map(|t| t.verb.top1 * t.n_samples as f64)
            .sum::<f64>()
            / total as f64;
        assert!((weighted - t.verb.top1).abs() < 1e-12);
        let weighted_action: f64 = tables
            .values()
            .map(|t| t.action.top1 * t.n_samples as f64)
            .sum::<f64>()
            / total as f64;
        assert!((weighted_action - t.action.top1).abs() < 1e-12);
    }

    #[test]
    fn csv_has_leaderboard_column_order() {
        let verb = vec![vec![1.0, 0.0]];
        let noun = vec![vec![1.0, 0.0]];
        let r = build_report(&verb, &noun, &[0], &[0], &[0], false, None).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("verb_top1,noun_top1,action_top1,verb_top5,noun_top5,action_top5"));
        assert!(csv.lines().nth(1).unwrap().starts_with("1,1,1,"));
    }
}
