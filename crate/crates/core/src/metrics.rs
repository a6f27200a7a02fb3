//! Evaluation metrics for both tasks.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    /// `None` when either side has zero variance.
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Mean over classes that have both positives and negatives in the mask.
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
    /// Classes whose AUC could not be computed.
    pub skipped_auc_classes: Vec<usize>,
}

fn check_nodes(nodes: &[usize], n: usize, op: &'static str) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Empty("evaluation mask"));
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= n) {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![n],
            right: vec![bad],
        });
    }
    Ok(())
}

pub fn mae(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// Sample Pearson correlation. Undefined (`None`) below two points or at
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

pub fn evaluate_regression(pred: &[f64], y: &[f64], nodes: &[usize]) -> Result<RegressionMetrics> {
    if pred.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_regression",
            left: vec![pred.len()],
            right: vec![y.len()],
        });
    }
    check_nodes(nodes, y.len(), "evaluate_regression")?;
    let p: Vec<f64> = nodes.iter().map(|&i| pred[i]).collect();
    let t: Vec<f64> = nodes.iter().map(|&i| y[i]).collect();
    Ok(RegressionMetrics {
        mae: mae(&p, &t),
        r: pearson(&p, &t),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One-vs-rest AUC from ranks: the fraction of (positive, negative) pairs
/// ordered correctly, ties counting one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn evaluate_classification(
    probabilities: &Tensor,
    classes: &[usize],
    nodes: &[usize],
) -> Result<ClassificationMetrics> {
    let c = probabilities.cols();
    if probabilities.rows() != classes.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_classification",
            left: probabilities.shape().to_vec(),
            right: vec![classes.len()],
        });
    }
    check_nodes(nodes, classes.len(), "evaluate_classification")?;
    for &i in nodes {
        let s: f64 = probabilities.row_slice(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(alloc::format!("probability row {i} sums to {s}")));
        }
        if classes[i] >= c {
            return Err(Error::InvalidConfig(alloc::format!(
                "class {} out of range for {c} columns",
                classes[i]
            )));
        }
    }

    let predicted: Vec<usize> = nodes.iter().map(|&i| argmax(probabilities.row_slice(i))).collect();
    let truth: Vec<usize> = nodes.iter().map(|&i| classes[i]).collect();
    let correct = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();

    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    let mut f1_sum = 0.0;
    for class in 0..c {
        let scores: Vec<f64> = nodes.iter().map(|&i| probabilities.get(i, class)).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        match binary_auc(&scores, &positive) {
            Some(a) => aucs.push(a),
            None => skipped.push(class),
        }
        let tp = predicted
            .iter()
            .zip(&truth)
            .filter(|&(&p, &t)| p == class && t == class)
            .count();
        let fp = predicted
            .iter()
            .zip(&truth)
            .filter(|&(&p, &t)| p == class && t != class)
            .count();
        let fn_ = predicted
            .iter()
            .zip(&truth)
            .filter(|&(&p, &t)| p != class && t == class)
            .count();
        if tp > 0 {
            f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / nodes.len() as f64,
        macro_auc: if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        },
        macro_f1: f1_sum / c as f64,
        skipped_auc_classes: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_examples() {
        let y = [50.0, 60.0, 70.0, 80.0];
        let all = [0, 1, 2, 3];
        let m = evaluate_regression(&y, &y, &all).unwrap();
        assert_eq!(m.mae, 0.0);
        assert!((m.r.unwrap() - 1.0).abs() < 1e-15);

        let anti: Vec<f64> = y.iter().map(|v| 200.0 - v).collect();
        assert!((evaluate_regression(&anti, &y, &all).unwrap().r.unwrap() + 1.0).abs() < 1e-15);

        let mean = y.iter().sum::<f64>() / 4.0;
        let null = evaluate_regression(&[mean; 4], &y, &all).unwrap();
        assert_eq!(null.mae, 10.0);
        assert_eq!(null.r, None);
    }

    #[test]
    fn regression_mask_is_respected() {
        let m = evaluate_regression(&[1.0, 100.0, 3.0], &[1.0, 0.0, 4.0], &[0, 2]).unwrap();
        assert_eq!(m.mae, 0.5);
        assert!(evaluate_regression(&[1.0], &[1.0], &[]).is_err());
        assert!(evaluate_regression(&[1.0], &[1.0], &[3]).is_err());
    }

    fn probs(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let p = probs(&[[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.4, 0.6]]);
        let m = evaluate_classification(&p, &[0, 1, 0, 1], &[0, 1, 2, 3]).unwrap();
        assert_eq!((m.accuracy, m.macro_auc, m.macro_f1), (1.0, Some(1.0), 1.0));
    }

    #[test]
    fn uniform_probabilities_are_chance() {
        let n = 8;
        let p = Tensor::filled(&[n, 4], 0.25);
        let classes: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let all: Vec<usize> = (0..n).collect();
        let m = evaluate_classification(&p, &classes, &all).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert_eq!(m.macro_auc, Some(0.5));
    }

    fn pair_count_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pair_enumeration_with_a_tie() {
        let scores = [0.9, 0.4, 0.6, 0.4, 0.2, 0.7];
        let positive = [true, true, false, false, false, true];
        let auc = binary_auc(&scores, &positive).unwrap();
        assert!((auc - pair_count_auc(&scores, &positive)).abs() < 1e-15);
        assert!((auc - 7.5 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_pair_enumeration_on_many_ties() {
        let scores = [0.1, 0.1, 0.3, 0.3, 0.3, 0.5, 0.5, 0.9, 0.1, 0.3];
        let positive = [false, true, true, false, true, false, true, true, false, false];
        let auc = binary_auc(&scores, &positive).unwrap();
        assert!((auc - pair_count_auc(&scores, &positive)).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_skipped_for_auc_and_zero_for_f1() {
        let p = Tensor::matrix(3, 3, vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.6, 0.3, 0.1]).unwrap();
        let m = evaluate_classification(&p, &[0, 1, 0], &[0, 1, 2]).unwrap();
        assert_eq!(m.skipped_auc_classes, vec![2]);
        assert_eq!(m.macro_auc, Some(1.0));
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rows_must_be_distributions() {
        let p = probs(&[[0.5, 0.6]]);
        assert!(evaluate_classification(&p, &[0], &[0]).is_err());
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4]), 1);
    }
}
