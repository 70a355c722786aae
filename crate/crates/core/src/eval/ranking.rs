use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Sentence scores for one question plus its evidence indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingCase {
    pub scores: Vec<f64>,
    pub positives: BTreeSet<usize>,
    pub qtype: usize,
}

/// Indices sorted by descending score; ties go to the lower index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `+ 0.0` folds -0.0 into 0.0 so the two tie.
    order.sort_by(|&a, &b| {
        (scores[b] + 0.0)
            .total_cmp(&(scores[a] + 0.0))
            .then(a.cmp(&b))
    });
    order
}

/// Mean over positives of the precision at that positive's rank.
pub fn average_precision(scores: &[f64], positives: &BTreeSet<usize>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::UndefinedAp);
    }
    if let Some(&j) = positives.iter().find(|&&j| j >= scores.len()) {
        return Err(Error::Shape(format!(
            "positive index {j} beyond {} scores",
            scores.len()
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, idx) in rank_order(scores).into_iter().enumerate() {
        if positives.contains(&idx) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

impl RankingCase {
    pub fn average_precision(&self) -> Result<f64> {
        average_precision(&self.scores, &self.positives)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision/recall/F1. Two empty sets score 1 on every measure.
pub fn evidence_f1(predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> SetScores {
    if predicted.is_empty() && gold.is_empty() {
        return SetScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let tp = predicted.intersection(gold).count() as f64;
    let precision = if predicted.is_empty() {
        0.0
    } else {
        tp / predicted.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        tp / gold.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SetScores {
        precision,
        recall,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn ap_reference_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.1, 0.5, 0.2], &set(&[0])).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision(&[0.2, 0.9, 0.1], &set(&[0])).unwrap(),
            0.5
        );
        // positives at ranks 1 and 3 of 4
        let ap = average_precision(&[4.0, 3.0, 2.0, 1.0], &set(&[0, 2])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(
            average_precision(&[1.0, 1.0, 1.0], &set(&[2])).unwrap(),
            1.0 / 3.0
        );
        assert_eq!(
            average_precision(&[1.0, 1.0, 1.0], &set(&[0])).unwrap(),
            1.0
        );
        assert_eq!(rank_order(&[-0.0, 0.0, -1.0]), vec![0, 1, 2]);
        assert_eq!(rank_order(&[0.0, -0.0]), vec![0, 1]);
    }

    #[test]
    fn ap_needs_positive() {
        assert!(matches!(
            average_precision(&[1.0], &set(&[])),
            Err(Error::UndefinedAp)
        ));
    }

    #[test]
    fn f1_cases() {
        assert_eq!(evidence_f1(&set(&[1, 4]), &set(&[1, 4])).f1, 1.0);
        assert_eq!(evidence_f1(&set(&[1]), &set(&[2])).f1, 0.0);
        let s = evidence_f1(&set(&[1, 2]), &set(&[2, 3]));
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(evidence_f1(&set(&[]), &set(&[])).f1, 1.0);
        assert_eq!(evidence_f1(&set(&[]), &set(&[3])).f1, 0.0);
    }
}
