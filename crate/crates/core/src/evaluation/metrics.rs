use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores and binary labels, aligned by position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedPredictions {
    pub patient_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RankedPredictions {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        let patient_ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self {
            patient_ids,
            scores,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() || self.patient_ids.len() != self.scores.len() {
            return Err(Error::Shape(
                "scores, labels and ids must have equal lengths".into(),
            ));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }
}

/// Mann-Whitney AUROC: fraction of (positive, negative) pairs ranked
/// correctly, tied pairs counting one half.
///
/// Sorts once and sweeps groups of equal scores, so it runs in
/// `O(n log n)`.
pub fn auroc(preds: &RankedPredictions) -> Result<f64> {
    preds.validate()?;
    let pos = preds.positives();
    let neg = preds.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes (positives {pos}, negatives {neg})"
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds.scores[a].total_cmp(&preds.scores[b]));

    // Count, for each positive, negatives strictly below it plus half the
    // negatives tied with it. Doubled to stay in integers.
    let mut twice_correct: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = preds.scores[order[i]];
        let mut j = i;
        let (mut p_tie, mut n_tie) = (0u128, 0u128);
        while j < order.len() && preds.scores[order[j]] == s {
            if preds.labels[order[j]] == 1 {
                p_tie += 1;
            } else {
                n_tie += 1;
            }
            j += 1;
        }
        twice_correct += p_tie * (2 * neg_below + n_tie);
        neg_below += n_tie;
        i = j;
    }
    Ok(twice_correct as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision: mean over positives of the precision at that
/// positive's rank. Ranks follow descending score; equal scores keep input
/// order.
pub fn auprc(preds: &RankedPredictions) -> Result<f64> {
    preds.validate()?;
    let pos = preds.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "AUPRC needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Stable sort keeps input order within ties.
    order.sort_by(|&a, &b| preds.scores[b].total_cmp(&preds.scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if preds.labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(scores: &[f64], labels: &[u8]) -> RankedPredictions {
        RankedPredictions::new(scores.to_vec(), labels.to_vec())
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&p(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&p(&[0.9, 0.8, 0.3], &[1, 0, 1])).unwrap(), 0.5);
        assert_eq!(auroc(&p(&[0.4; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert!(matches!(
            auroc(&p(&[0.1, 0.2], &[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&p(&[0.3], &[1])).unwrap(), 1.0);
        assert_eq!(auprc(&p(&[0.2, 0.9], &[1, 0])).unwrap(), 0.5);
        assert_eq!(
            auprc(&p(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0])).unwrap(),
            1.0
        );
        assert!(matches!(
            auprc(&p(&[0.1], &[0])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auprc_ties_use_input_order() {
        // Positive first among equals -> rank 1.
        assert_eq!(auprc(&p(&[0.5, 0.5], &[1, 0])).unwrap(), 1.0);
        assert_eq!(auprc(&p(&[0.5, 0.5], &[0, 1])).unwrap(), 0.5);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let bad = RankedPredictions {
            patient_ids: vec!["a".into()],
            scores: vec![0.1, 0.2],
            labels: vec![1, 0],
        };
        assert!(auroc(&bad).is_err());
    }
}
