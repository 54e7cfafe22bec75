//! AUC, accuracy and fold aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney rank statistic, counting
/// tied scores as half a win.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auc over NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, using the average rank within each tie group.
    // Ranks are doubled to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j, doubled average = i + 1 + j.
        let avg2 = (i + 1 + j) as u128;
        let p = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += avg2 * p;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R - p(p+1)/2, doubled.
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fraction of predictions where `p >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("accuracy", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of no records".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    if values.iter().all(|&v| v == values[0]) {
        return Some((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, crate::math::sqrt(var)))
}

/// `0.8246±0.0018`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4}±{std:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores_give_one() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), 1.0);
        let rev: Vec<bool> = l.iter().map(|x| !x).collect();
        assert_eq!(auc(&s, &rev).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_give_half() {
        let s = [0.3; 6];
        let l = [true, false, true, false, false, true];
        assert_eq!(auc(&s, &l).unwrap(), 0.5);
    }

    #[test]
    fn partial_ties() {
        // pos {0.5, 0.7}, neg {0.5, 0.2}: pairs (0.5,0.5)=.5, (0.5,0.2)=1,
        // (0.7,0.5)=1, (0.7,0.2)=1 -> 3.5/4.
        let s = [0.5, 0.7, 0.5, 0.2];
        let l = [true, true, false, false];
        assert_eq!(auc(&s, &l).unwrap(), 0.875);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn accuracy_threshold_convention() {
        let s = [0.5; 4];
        let l = [true, true, false, true];
        assert_eq!(accuracy(&s, &l, 0.5).unwrap(), 0.75);
        assert_eq!(accuracy(&[1.0, 0.0], &[true, false], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn report_format() {
        assert_eq!(format_mean_std(0.82461, 0.00178), "0.8246±0.0018");
        let (m, s) = mean_std(&[0.7, 0.7, 0.7]).unwrap();
        assert_eq!(m, 0.7);
        assert_eq!(s, 0.0);
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
    }
}
