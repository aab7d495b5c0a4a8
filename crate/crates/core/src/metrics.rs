//! Threshold-free and thresholded binary detection metrics.
//!
//! Labels are `true` for synthetic images, the positive class. Scores are
//! higher for "more synthetic".

use crate::error::{Error, Result};

fn check(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch(labels.len(), scores.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::OutOfRange(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; ties keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Cumulative `(tp, fp)` at each distinct score, from the highest down.
fn operating_points(labels: &[bool], scores: &[f64]) -> Vec<(usize, usize)> {
    let idx = descending(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = k + 1 == idx.len() || scores[idx[k + 1]] != scores[i];
        if last_of_group {
            points.push((tp, fp));
        }
    }
    points
}

/// Step-wise area under the precision-recall curve:
/// `sum_k (R_k - R_{k-1}) P_k` over distinct score thresholds.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = check(labels, scores)?;
    if pos == 0 {
        return Err(Error::SingleClass("average precision needs at least one synthetic image".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in operating_points(labels, scores) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Probability that a random synthetic image outscores a random real one,
/// ties counting one half.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("ROC-AUC needs both classes".into()));
    }
    // Walk ascending score groups, counting negatives strictly below.
    let mut idx = descending(scores);
    idx.reverse();
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                gp += 1;
            } else {
                gn += 1;
            }
            k += 1;
        }
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Highest true-positive rate over thresholds `t` (predicting synthetic when
/// `score >= t`, including `t = +inf`) whose false-positive rate is at most
/// `max_fpr`.
pub fn tpr_at_fpr(labels: &[bool], scores: &[f64], max_fpr: f64) -> Result<f64> {
    let (pos, neg) = check(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("TPR at fixed FPR needs both classes".into()));
    }
    if !(0.0..=1.0).contains(&max_fpr) {
        return Err(Error::OutOfRange(format!("FPR cap {max_fpr}")));
    }
    let mut best = 0.0;
    for (tp, fp) in operating_points(labels, scores) {
        if fp as f64 / neg as f64 <= max_fpr {
            best = tp as f64 / pos as f64;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Fraction of images classified correctly with `score >= threshold`
/// meaning synthetic.
pub fn accuracy(labels: &[bool], scores: &[f64], threshold: f64) -> Result<f64> {
    check(labels, scores)?;
    let correct = labels
        .iter()
        .zip(scores)
        .filter(|(&l, &s)| (s >= threshold) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy restricted to one class; `None` if that class is absent.
pub fn class_accuracy(labels: &[bool], scores: &[f64], threshold: f64, synthetic: bool) -> Result<Option<f64>> {
    check(labels, scores)?;
    let (n, correct) = labels
        .iter()
        .zip(scores)
        .filter(|(&l, _)| l == synthetic)
        .fold((0usize, 0usize), |(n, c), (&l, &s)| (n + 1, c + usize::from((s >= threshold) == l)));
    Ok((n > 0).then(|| correct as f64 / n as f64))
}

/// F1 of the synthetic class; zero when precision and recall are both zero.
pub fn f1_score(labels: &[bool], scores: &[f64], threshold: f64) -> Result<f64> {
    check(labels, scores)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&l, &s) in labels.iter().zip(scores) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force reference implementations straight from the definitions.

    /// Precision and recall at every candidate threshold, ordered by
    /// decreasing threshold.
    pub fn ap(labels: &[bool], scores: &[f64]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for t in thresholds {
            let tp = (0..labels.len()).filter(|&i| scores[i] >= t && labels[i]).count() as f64;
            let predicted = (0..labels.len()).filter(|&i| scores[i] >= t).count() as f64;
            let r = tp / pos;
            ap += (r - prev_r) * (tp / predicted);
            prev_r = r;
        }
        ap
    }

    pub fn auc(labels: &[bool], scores: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    pub fn tpr_at(labels: &[bool], scores: &[f64], cap: f64) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut candidates: Vec<f64> = scores.to_vec();
        candidates.push(f64::INFINITY);
        let mut best: f64 = 0.0;
        for t in candidates {
            let tp = (0..labels.len()).filter(|&i| scores[i] >= t && labels[i]).count() as f64;
            let fp = (0..labels.len()).filter(|&i| scores[i] >= t && !labels[i]).count() as f64;
            if fp / neg <= cap {
                best = best.max(tp / pos);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_inverted_rankings() {
        let labels = [false, false, true, true];
        let good = [0.1, 0.2, 0.8, 0.9];
        let bad = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(average_precision(&labels, &good).unwrap(), 1.0);
        assert_eq!(roc_auc(&labels, &good).unwrap(), 1.0);
        assert_eq!(roc_auc(&labels, &bad).unwrap(), 0.0);
        assert_eq!(tpr_at_fpr(&labels, &good, 0.0).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&labels, &bad, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_example() {
        // Ranking: S(0.9) R(0.8) S(0.7) R(0.3): precision at hits 1, 2/3.
        let labels = [true, false, true, false];
        let scores = [0.9, 0.8, 0.7, 0.3];
        let ap = average_precision(&labels, &scores).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(roc_auc(&labels, &scores).unwrap(), 0.75);
        assert_eq!(tpr_at_fpr(&labels, &scores, 0.0).unwrap(), 0.5);
        assert_eq!(tpr_at_fpr(&labels, &scores, 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&labels, &scores, 0.5).unwrap(), 0.75);
        assert!((f1_score(&labels, &scores, 0.5).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(roc_auc(&[true, false], &[0.5, 0.5]).unwrap(), 0.5);
        // All tied: one threshold, precision = prevalence.
        assert_eq!(average_precision(&[true, false, false, false], &[0.3; 4]).unwrap(), 0.25);
    }

    #[test]
    fn undefined_cases_error() {
        assert!(matches!(roc_auc(&[true, true], &[0.1, 0.2]), Err(Error::SingleClass(_))));
        assert!(matches!(average_precision(&[false, false], &[0.1, 0.2]), Err(Error::SingleClass(_))));
        assert!(matches!(tpr_at_fpr(&[false], &[0.1], 0.1), Err(Error::SingleClass(_))));
        assert!(matches!(accuracy(&[], &[], 0.5), Err(Error::EmptyInput)));
        assert!(accuracy(&[true], &[0.1, 0.2], 0.5).is_err());
        assert!(roc_auc(&[true, false], &[f64::NAN, 0.2]).is_err());
    }

    #[test]
    fn f1_zero_when_nothing_predicted() {
        assert_eq!(f1_score(&[true, false], &[0.1, 0.2], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn class_accuracies() {
        let labels = [true, true, false, false];
        let scores = [0.9, 0.4, 0.1, 0.6];
        assert_eq!(class_accuracy(&labels, &scores, 0.5, true).unwrap(), Some(0.5));
        assert_eq!(class_accuracy(&labels, &scores, 0.5, false).unwrap(), Some(0.5));
        assert_eq!(class_accuracy(&[true], &[0.9], 0.5, false).unwrap(), None);
    }

    #[test]
    fn matches_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(2..=100);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            // Coarse scores so ties are common.
            let levels = rng.gen_range(2..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            assert!((average_precision(&labels, &scores).unwrap() - oracle::ap(&labels, &scores)).abs() < 1e-9);
            assert!((roc_auc(&labels, &scores).unwrap() - oracle::auc(&labels, &scores)).abs() < 1e-9);
            for cap in [0.1, 0.01] {
                let a = tpr_at_fpr(&labels, &scores, cap).unwrap();
                assert!((a - oracle::tpr_at(&labels, &scores, cap)).abs() < 1e-9);
            }
        }
    }
}
