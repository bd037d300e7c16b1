use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest true-positive rate over score thresholds whose false-positive
/// rate does not exceed `target_fpr`. A sample is called positive when its
/// score is at least the threshold; thresholds are the distinct scores.
pub fn roc_tpr_at_fpr(scores: &[f64], labels: &[bool], target_fpr: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::validation(format!("target FPR must lie in (0, 1), got {target_fpr}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("ROC needs both positive and negative samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / neg as f64 > target_fpr {
            break;
        }
        best = tp as f64 / pos as f64;
    }
    Ok(best)
}

/// Cut-based baseline over summary features: a sample's score is the number
/// of per-feature thresholds it exceeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutBaseline {
    pub thresholds: [f64; 3],
}

/// Background quantiles tried as cut positions for each feature.
const CUT_QUANTILES: [f64; 15] = [
    0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.93, 0.95, 0.97, 0.98, 0.99, 0.995, 0.998, 0.999, 1.0,
];

impl CutBaseline {
    pub fn scores(&self, features: &[[f64; 3]]) -> Vec<f64> {
        features
            .iter()
            .map(|f| f.iter().zip(&self.thresholds).filter(|(v, t)| v > t).count() as f64)
            .collect()
    }

    /// Grid search over background-quantile cuts maximizing TPR at `target_fpr`
    /// on the given (held-out) samples.
    pub fn fit(features: &[[f64; 3]], labels: &[bool], target_fpr: f64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::validation("cannot fit a baseline on an empty dataset"));
        }
        if features.len() != labels.len() {
            return Err(Error::validation("feature and label counts differ"));
        }
        let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(3);
        for j in 0..3 {
            let mut bg: Vec<f64> = features
                .iter()
                .zip(labels)
                .filter(|(_, &l)| !l)
                .map(|(f, _)| f[j])
                .collect();
            if bg.is_empty() {
                return Err(Error::validation("baseline fit needs background samples"));
            }
            bg.sort_by(f64::total_cmp);
            let mut c = vec![f64::NEG_INFINITY];
            for q in CUT_QUANTILES {
                let idx = ((q * (bg.len() - 1) as f64).round() as usize).min(bg.len() - 1);
                c.push(bg[idx]);
            }
            c.dedup();
            candidates.push(c);
        }
        let mut best = (f64::NEG_INFINITY, CutBaseline { thresholds: [f64::NEG_INFINITY; 3] });
        for &a in &candidates[0] {
            for &b in &candidates[1] {
                for &c in &candidates[2] {
                    let cut = CutBaseline { thresholds: [a, b, c] };
                    let tpr = roc_tpr_at_fpr(&cut.scores(features), labels, target_fpr)?;
                    if tpr > best.0 {
                        best = (tpr, cut);
                    }
                }
            }
        }
        Ok(best.1)
    }
}

/// Fits the cut baseline on `fit_*` and scores `eval_features`.
pub fn baseline_cut_classifier(
    fit_features: &[[f64; 3]],
    fit_labels: &[bool],
    eval_features: &[[f64; 3]],
    target_fpr: f64,
) -> Result<(CutBaseline, Vec<f64>)> {
    if eval_features.is_empty() {
        return Err(Error::validation("cannot score an empty dataset"));
    }
    let cut = CutBaseline::fit(fit_features, fit_labels, target_fpr)?;
    let scores = cut.scores(eval_features);
    Ok((cut, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores_reach_full_tpr() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        assert_eq!(roc_tpr_at_fpr(&scores, &labels, 1e-3).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_have_no_usable_threshold() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, false, true];
        assert_eq!(roc_tpr_at_fpr(&scores, &labels, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            roc_tpr_at_fpr(&[0.1, 0.2], &[true, true], 0.1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dominant_signal_gives_perfect_baseline() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let sig = i % 5 == 0;
            let base = (i % 17) as f64;
            let f = if sig { base + 100.0 } else { base };
            feats.push([f, f * 2.0, f + 1.0]);
            labels.push(sig);
        }
        let (_, scores) = baseline_cut_classifier(&feats, &labels, &feats, 0.002).unwrap();
        assert_eq!(roc_tpr_at_fpr(&scores, &labels, 0.002).unwrap(), 1.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(baseline_cut_classifier(&[], &[], &[], 0.01).is_err());
    }
}
