//! MSE, AUC and NDCG@k for the real-data style evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::domain("mse needs equal-length inputs"));
    }
    if preds.is_empty() {
        return Err(Error::empty("mse of an empty set"));
    }
    Ok(preds.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Mann–Whitney AUC with ties counted as one half.
///
/// Computed from average ranks in `O(n log n)`.
pub fn auc(preds: &[f64], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::domain("auc needs equal-length inputs"));
    }
    if preds.iter().any(|p| p.is_nan()) {
        return Err(Error::domain("auc input contains NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain("auc undefined without both classes"));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && preds[order[end]] == preds[order[start]] {
            end += 1;
        }
        // 1-based average rank of the tie block
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_block = order[start..end].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg_rank * pos_in_block as f64;
        start = end;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// NDCG@k with binary gains for a single user's ranked list. Returns `None`
/// when the user has no positive item.
pub fn user_ndcg_at_k(preds: &[f64], labels: &[bool], k: usize) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Descending score, ties broken by position for determinism.
    order.sort_by(|&a, &b| preds[b].total_cmp(&preds[a]).then(a.cmp(&b)));
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &idx)| labels[idx])
        .map(|(rank, _)| discount(rank))
        .sum();
    let idcg: f64 = (0..n_pos.min(k)).map(discount).sum();
    Some(dcg / idcg)
}

/// Mean per-user NDCG@k over users with at least one positive.
pub fn ndcg_at_k(groups: &[(Vec<f64>, Vec<bool>)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("ndcg cutoff k must be positive"));
    }
    let scores: Vec<f64> = groups.iter().filter_map(|(p, l)| user_ndcg_at_k(p, l, k)).collect();
    if scores.is_empty() {
        return Err(Error::empty("no user with a positive item"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Scored evaluation triples.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub users: Vec<usize>,
    pub preds: Vec<f64>,
    /// Labels scaled to `[0, 1]`, used by MSE.
    pub targets: Vec<f64>,
    /// Binarized labels, used by AUC and NDCG.
    pub positive: Vec<bool>,
}

impl EvalSet {
    pub fn push(&mut self, user: usize, pred: f64, target: f64, positive: bool) {
        self.users.push(user);
        self.preds.push(pred);
        self.targets.push(target);
        self.positive.push(positive);
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn by_user(&self) -> Vec<(Vec<f64>, Vec<bool>)> {
        let mut groups: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for k in 0..self.len() {
            let g = groups.entry(self.users[k]).or_default();
            g.0.push(self.preds[k]);
            g.1.push(self.positive[k]);
        }
        groups.into_values().collect()
    }

    pub fn evaluate(&self) -> Result<MetricRow> {
        let groups = self.by_user();
        Ok(MetricRow {
            mse: mse(&self.preds, &self.targets)?,
            auc: auc(&self.preds, &self.positive)?,
            ndcg5: ndcg_at_k(&groups, 5)?,
            ndcg10: ndcg_at_k(&groups, 10)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mse: f64,
    pub auc: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// ROC curve integrated with the trapezoid rule, as an independent route.
    fn trapezoid_auc(preds: &[f64], labels: &[bool]) -> f64 {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].total_cmp(&preds[a]));
        let np = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - np;
        let (mut tp, mut fp, mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut k = 0;
        while k < order.len() {
            let mut j = k;
            while j < order.len() && preds[order[j]] == preds[order[k]] {
                if labels[order[j]] {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                j += 1;
            }
            let (tpr, fpr) = (tp / np, fp / nn);
            area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
            prev_tpr = tpr;
            prev_fpr = fpr;
            k = j;
        }
        area
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_matches_two_pass_sum() {
        let preds: Vec<f64> = (0..97).map(|k| ((k * 37) % 101) as f64 / 101.0).collect();
        let labels: Vec<f64> = (0..97).map(|k| ((k * 53) % 7) as f64 / 6.0).collect();
        let diffs: Vec<f64> = preds.iter().zip(&labels).map(|(p, l)| p - l).collect();
        let mut total = 0.0;
        for d in &diffs {
            total += d * d;
        }
        assert_relative_eq!(mse(&preds, &labels).unwrap(), total / 97.0, max_relative = 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn ndcg_examples() {
        let ideal = user_ndcg_at_k(&[0.9, 0.8, 0.1], &[true, true, false], 5).unwrap();
        assert_relative_eq!(ideal, 1.0);
        let second = user_ndcg_at_k(&[0.9, 0.8, 0.1, 0.0], &[false, true, false, false], 5).unwrap();
        assert_relative_eq!(second, 1.0 / 3f64.log2(), max_relative = 1e-15);
        assert!(user_ndcg_at_k(&[0.3, 0.2], &[false, false], 5).is_none());

        let groups = vec![
            (vec![0.9, 0.1], vec![true, false]),
            (vec![0.9, 0.1], vec![false, false]),
            (vec![0.1, 0.9], vec![true, false]),
        ];
        let mean = ndcg_at_k(&groups, 5).unwrap();
        assert_relative_eq!(mean, (1.0 + 1.0 / 3f64.log2()) / 2.0);
        assert!(ndcg_at_k(&groups, 0).is_err());
    }

    #[test]
    fn ndcg_cutoff_drops_late_positives() {
        let preds: Vec<f64> = (0..8).map(|k| 1.0 - k as f64 / 10.0).collect();
        let mut labels = vec![false; 8];
        labels[6] = true;
        assert_eq!(user_ndcg_at_k(&preds, &labels, 5), Some(0.0));
        assert!(user_ndcg_at_k(&preds, &labels, 10).unwrap() > 0.0);
    }

    #[test]
    fn eval_set_groups_users() {
        let mut set = EvalSet::default();
        set.push(2, 0.9, 1.0, true);
        set.push(0, 0.2, 0.0, false);
        set.push(2, 0.1, 0.25, false);
        set.push(0, 0.7, 0.75, true);
        let row = set.evaluate().unwrap();
        assert_eq!(row.auc, 1.0);
        assert_eq!(row.ndcg5, 1.0);
        assert_relative_eq!(row.mse, (0.01 + 0.04 + 0.0225 + 0.0025) / 4.0);
    }

    use proptest::prelude::*;

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec((0u32..20).prop_map(|x| x as f64 / 10.0), n),
                    prop::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
    }

    proptest! {
        #[test]
        fn auc_matches_trapezoid((preds, labels) in scored()) {
            let a = auc(&preds, &labels).unwrap();
            prop_assert!((a - trapezoid_auc(&preds, &labels)).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn auc_invariant_under_monotone_transform((preds, labels) in scored()) {
            let mapped: Vec<f64> = preds.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
            prop_assert_eq!(auc(&preds, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn ndcg_grows_when_a_positive_moves_up(
            labels in prop::collection::vec(any::<bool>(), 2..20),
            pos in 1usize..19,
            k in 1usize..12,
        ) {
            let n = labels.len();
            let pos = pos % (n - 1) + 1;
            prop_assume!(labels[pos] && !labels[pos - 1]);
            let preds: Vec<f64> = (0..n).map(|r| (n - r) as f64).collect();
            let mut swapped = labels.clone();
            swapped.swap(pos, pos - 1);
            let before = user_ndcg_at_k(&preds, &labels, k).unwrap();
            let after = user_ndcg_at_k(&preds, &swapped, k).unwrap();
            prop_assert!(after >= before - 1e-15);
        }
    }
}
