use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

fn check_len(metric: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{metric}: {a} scores for {b} labels")));
    }
    Ok(())
}

/// Mann-Whitney AUROC: `(concordant + tied / 2) / (n_pos * n_neg)`.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    check_len("AUROC", scores.len(), labels.len())?;
    let (np, nn) = class_counts(labels);
    if np == 0 || nn == 0 {
        return Err(Error::undefined("AUROC", "needs both classes present"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // ascending; negatives strictly below the current group
    let (mut concordant, mut tied, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        concordant += gp * neg_below;
        tied += gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok((2 * concordant + tied) as f64 / (2 * np * nn) as f64)
}

/// Operating point meeting a sensitivity floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub specificity: f64,
    pub sensitivity: f64,
    /// Predict positive iff `score >= threshold`; may be infinite.
    pub threshold: f64,
}

/// Largest threshold (over observed scores and +/- infinity) whose
/// sensitivity reaches `target`; specificity is maximal there because it
/// can only fall as the threshold drops.
pub fn spec_at_sens<T: Scalar>(scores: &[T], labels: &[bool], target: f64) -> Result<OperatingPoint> {
    check_len("specificity at sensitivity", scores.len(), labels.len())?;
    let (np, nn) = class_counts(labels);
    if np == 0 || nn == 0 {
        return Err(Error::undefined("specificity at sensitivity", "needs both classes present"));
    }
    let mut s: Vec<f64> = scores.iter().map(|v| v.as_f64()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s.dedup();
    let mut thresholds = vec![f64::INFINITY];
    thresholds.extend(s);
    thresholds.push(f64::NEG_INFINITY);
    for t in thresholds {
        let (mut tp, mut tn) = (0u64, 0u64);
        for (v, &l) in scores.iter().zip(labels) {
            let predicted = v.as_f64() >= t;
            if l && predicted {
                tp += 1;
            } else if !l && !predicted {
                tn += 1;
            }
        }
        let sens = tp as f64 / np as f64;
        if sens >= target {
            return Ok(OperatingPoint {
                specificity: tn as f64 / nn as f64,
                sensitivity: sens,
                threshold: t,
            });
        }
    }
    unreachable!("the -inf threshold reaches sensitivity 1")
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best as u32
}

/// Classes ordered by decreasing score, ties by lower index.
pub fn ranking<T: Scalar>(row: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// One-vs-rest AUROCs (None for classes absent from `labels`) and their mean.
pub fn macro_auc<T: Scalar>(scores: &[Vec<T>], labels: &[u32]) -> Result<(f64, Vec<Option<f64>>)> {
    check_len("macro AUC", scores.len(), labels.len())?;
    let c = scores.first().map(|r| r.len()).unwrap_or(0);
    let present: Vec<bool> = (0..c).map(|k| labels.iter().any(|&l| l as usize == k)).collect();
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::undefined("macro AUC", "needs at least two classes present"));
    }
    if c == 2 {
        let s: Vec<T> = scores.iter().map(|r| r[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let a = auroc(&s, &l)?;
        return Ok((a, vec![Some(a), Some(a)]));
    }
    let mut per = Vec::with_capacity(c);
    for (k, &has) in present.iter().enumerate() {
        if !has {
            log::warn!("class {k} absent from labels; excluded from macro AUC");
            per.push(None);
            continue;
        }
        let s: Vec<T> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
        per.push(Some(auroc(&s, &l)?));
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, per))
}

pub fn topk_accuracy<T: Scalar>(scores: &[Vec<T>], labels: &[u32], k: usize) -> Result<f64> {
    check_len("top-k accuracy", scores.len(), labels.len())?;
    let c = scores.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("top-k needs 1 <= k <= {c}, got {k}")));
    }
    if scores.is_empty() {
        return Err(Error::undefined("top-k accuracy", "no items"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(row, &l)| ranking(row)[..k].contains(&(l as usize)))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

pub fn accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    check_len("accuracy", preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::undefined("accuracy", "no items"));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

fn f1_for(preds: &[u32], labels: &[u32], class: u32) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// F1 of `positive`; 0 when there are no true positives.
pub fn f1(preds: &[u32], labels: &[u32], positive: u32) -> Result<f64> {
    check_len("F1", preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::undefined("F1", "no items"));
    }
    Ok(f1_for(preds, labels, positive))
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    check_len("balanced accuracy", preds.len(), labels.len())?;
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::undefined("balanced accuracy", "no items"));
    }
    let recall: f64 = classes
        .iter()
        .map(|&c| {
            let support = labels.iter().filter(|&&l| l == c).count();
            let hit = preds.iter().zip(labels).filter(|(&p, &l)| l == c && p == c).count();
            hit as f64 / support as f64
        })
        .sum();
    Ok(recall / classes.len() as f64)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &[u32], labels: &[u32]) -> Result<f64> {
    check_len("weighted F1", preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::undefined("weighted F1", "no items"));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let total: f64 = classes
        .iter()
        .map(|&c| labels.iter().filter(|&&l| l == c).count() as f64 * f1_for(preds, labels, c))
        .sum();
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let l = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(auroc(&[0.7, 0.7, 0.3], &[true, false, false]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[true, true]).unwrap_err().to_string().contains("AUROC undefined"));
    }

    #[test]
    fn spec_at_sens_examples() {
        let s = [0.9, 0.8, 0.3, 0.4, 0.1];
        let l = [true, true, true, false, false];
        let op = spec_at_sens(&s, &l, 0.95).unwrap();
        assert_eq!((op.specificity, op.threshold), (0.5, 0.3));
        let zero = spec_at_sens(&s, &l, 0.0).unwrap();
        assert_eq!(zero.specificity, 1.0);
        let perfect = spec_at_sens(&[0.9, 0.8, 0.2], &[true, true, false], 0.95).unwrap();
        assert_eq!(perfect.specificity, 1.0);
    }

    #[test]
    fn f1_hand_count() {
        assert_eq!(f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap(), 0.5);
        assert_eq!(accuracy(&[1, 0], &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let s = vec![vec![0.5, 0.5, 0.0]];
        assert_eq!(topk_accuracy(&s, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[2], 3).unwrap(), 1.0);
    }
}
