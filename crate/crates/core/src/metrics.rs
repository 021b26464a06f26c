//! Ranking metrics with anomalous as the positive class.

use alloc::vec::Vec;

use crate::error::{Error, Result};

fn counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassLabels);
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of tied scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(alloc::vec![i]),
        }
    }
    groups
}

/// Probability that a random anomalous sample outscores a random normal
/// one, ties counting one half. `labels[i]` is `true` for anomalous.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InsufficientData(
            "scores and labels differ in length".into(),
        ));
    }
    let (pos, neg) = counts(labels)?;
    // Count, for each tie group from the top, positives beating every
    // negative ranked below plus half the tied pairs.
    let mut wins2: u128 = 0;
    let mut neg_below = neg as u128;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count() as u128;
        let n = g.len() as u128 - p;
        neg_below -= n;
        wins2 += 2 * p * neg_below + p * n;
    }
    Ok(wins2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve (average precision):
/// `sum_k (R_k - R_{k-1}) P_k` over distinct score thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InsufficientData(
            "scores and labels differ in length".into(),
        ));
    }
    let (pos, _) = counts(labels)?;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut area = 0.0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += g.len();
        if p > 0 {
            area += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(area)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_points() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let l = [true, true, false, false];
        assert_eq!(roc_auc(&s, &l).unwrap(), 1.0);
        assert_eq!(auprc(&s, &l).unwrap(), 1.0);
        let s = [0.8, 0.3, 0.5, 0.1];
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
        // thresholds 0.8: P=1 R=.5; 0.5: P=.5 R=.5; 0.3: P=2/3 R=1
        assert!((auprc(&s, &l).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1.0], &[true]), Err(Error::SingleClassLabels));
        assert_eq!(
            auprc(&[1.0, 2.0], &[false, false]),
            Err(Error::SingleClassLabels)
        );
    }
}
