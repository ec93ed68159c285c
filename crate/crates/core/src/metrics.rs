//! Threshold-free ranking metrics over flattened score/label vectors.
//!
//! AUROC is the Mann-Whitney statistic computed by midranks; AUPRC is average
//! precision with tied scores entering each precision/recall point atomically.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Paired scores and binary labels, validated at construction.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::validation("metrics: empty score vector"));
        }
        if scores.len() != labels.len() {
            return Err(Error::validation(format!(
                "metrics: {} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::validation(format!(
                "metrics: non-finite score at index {i}"
            )));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Area under the ROC curve: P(score_pos > score_neg) + half the tie mass.
///
/// Computed via midranks: auroc = (R_pos - n_pos(n_pos+1)/2) / (n_pos * n_neg)
/// where R_pos is the midrank sum of the positives.
pub fn auroc(sl: &ScoredLabels) -> Result<f64> {
    let n = sl.scores.len();
    let n_pos = sl.n_pos();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation(
            "auroc undefined: labels contain a single class",
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sl.scores[a].total_cmp(&sl.scores[b]));

    // Midranks: every member of a tie group gets the group's average rank.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sl.scores[order[j]] == sl.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j average to (i + j + 1) / 2.
        let midrank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if sl.labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: sum of precision at each tie group containing positives,
/// weighted by the recall gained there. Tie groups are atomic: every item of
/// equal score is counted before precision is read off.
pub fn auprc(sl: &ScoredLabels) -> Result<f64> {
    let n = sl.scores.len();
    let n_pos = sl.n_pos();
    if n_pos == 0 {
        return Err(Error::validation("auprc undefined: no positive labels"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sl.scores[b].total_cmp(&sl.scores[a]));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut tp_group = 0usize;
        while j < n && sl.scores[order[j]] == sl.scores[order[i]] {
            if sl.labels[order[j]] {
                tp_group += 1;
            }
            j += 1;
        }
        tp += tp_group;
        seen += j - i;
        if tp_group > 0 {
            let precision = tp as f64 / seen as f64;
            ap += tp_group as f64 * precision;
        }
        i = j;
    }

    Ok(ap / n_pos as f64)
}

/// Flattens a d x d score matrix and d x d adjacency row-major and returns
/// (auroc, auprc). The diagonal participates like any other entry.
pub fn evaluate_graph(scores: &Array2<f64>, adjacency: &Array2<u8>) -> Result<(f64, f64)> {
    if scores.dim() != adjacency.dim() {
        return Err(Error::validation(format!(
            "evaluate_graph: score shape {:?} vs adjacency shape {:?}",
            scores.dim(),
            adjacency.dim()
        )));
    }
    let sl = ScoredLabels::new(
        scores.iter().copied().collect(),
        adjacency.iter().map(|&a| a != 0).collect(),
    )?;
    Ok((auroc(&sl)?, auprc(&sl)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sl(scores: &[f64], labels: &[u8]) -> ScoredLabels {
        ScoredLabels::new(
            scores.to_vec(),
            labels.iter().map(|&l| l != 0).collect(),
        )
        .unwrap()
    }

    /// O(n^2) pair-counting reference: correct pairs count 1, ties count 1/2.
    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut won = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    won += 1.0;
                } else if scores[i] == scores[j] {
                    won += 0.5;
                }
            }
        }
        won / total
    }

    /// O(n^2) threshold-enumeration reference for average precision.
    fn auprc_enum(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut ap = 0.0;
        let mut prev_tp = 0.0;
        for &thr in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (s, &l) in scores.iter().zip(labels) {
                if *s >= thr {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            if tp > prev_tp {
                ap += (tp - prev_tp) * tp / (tp + fp);
            }
            prev_tp = tp;
        }
        ap / n_pos
    }

    #[test]
    fn auroc_handles_mixed_ordering() {
        let v = sl(&[0.9, 0.4, 0.35, 0.8], &[1, 0, 1, 0]);
        assert_eq!(auroc(&v).unwrap(), 0.5);
    }

    #[test]
    fn auroc_perfect_separation() {
        let v = sl(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(auroc(&v).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let v = sl(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]);
        assert_eq!(auroc(&v).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_is_error() {
        let v = sl(&[0.1, 0.2], &[1, 1]);
        assert!(matches!(auroc(&v), Err(Error::Validation(_))));
    }

    #[test]
    fn auprc_tie_free_case() {
        let v = sl(&[0.9, 0.8, 0.4, 0.35], &[1, 0, 0, 1]);
        assert_eq!(auprc(&v).unwrap(), 0.75);
    }

    #[test]
    fn auprc_perfect_separation() {
        let v = sl(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(auprc(&v).unwrap(), 1.0);
    }

    #[test]
    fn auprc_all_positive_is_one() {
        let v = sl(&[0.3, 0.1, 0.7], &[1, 1, 1]);
        assert_eq!(auprc(&v).unwrap(), 1.0);
    }

    #[test]
    fn auprc_no_positives_is_error() {
        let v = sl(&[0.3, 0.1], &[0, 0]);
        assert!(matches!(auprc(&v), Err(Error::Validation(_))));
    }

    #[test]
    fn auprc_tie_group_is_atomic() {
        // One positive and one negative share a score: the group enters as a
        // block, precision there is 2 tp / 3 seen after the block.
        let v = sl(&[0.9, 0.5, 0.5], &[1, 1, 0]);
        let expected = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((auprc(&v).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn evaluate_graph_on_exact_scores() {
        let adj = array![[1u8, 0], [0, 1]];
        let scores = array![[1.0, 0.0], [0.0, 1.0]];
        let (roc, prc) = evaluate_graph(&scores, &adj).unwrap();
        assert_eq!((roc, prc), (1.0, 1.0));
    }

    #[test]
    fn evaluate_graph_shape_mismatch() {
        let adj = array![[1u8, 0], [0, 1]];
        let scores = Array2::zeros((3, 3));
        assert!(evaluate_graph(&scores, &adj).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(
            raw in prop::collection::vec((0u8..5, prop::bool::ANY), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let v = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
            let fast = auroc(&v).unwrap();
            let slow = auroc_pairs(&scores, &labels);
            prop_assert!((fast - slow).abs() <= 1e-12);
        }

        #[test]
        fn auprc_matches_enumeration(
            raw in prop::collection::vec((0u8..5, prop::bool::ANY), 1..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l));
            let v = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
            let fast = auprc(&v).unwrap();
            let slow = auprc_enum(&scores, &labels);
            prop_assert!((fast - slow).abs() <= 1e-12);
        }

        #[test]
        fn metrics_invariant_under_monotone_transform(
            raw in prop::collection::vec((0u8..6, prop::bool::ANY), 2..30)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp()).collect();
            let a = ScoredLabels::new(scores, labels.clone()).unwrap();
            let b = ScoredLabels::new(transformed, labels).unwrap();
            prop_assert!((auroc(&a).unwrap() - auroc(&b).unwrap()).abs() <= 1e-12);
            prop_assert!((auprc(&a).unwrap() - auprc(&b).unwrap()).abs() <= 1e-12);
        }
    }
}
