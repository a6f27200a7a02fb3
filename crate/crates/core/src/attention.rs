//! Global phenotype attention: a per-subject MLP whose sigmoid scores are
//! averaged over the population and min-max rescaled into one weight per
//! phenotype.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Column, ColumnKind};
use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Uniform initialization in `±1/sqrt(fan_in)`.
pub(crate) fn init_uniform(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// One hidden ReLU layer, sigmoid output of the same width as the input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl AttentionMlp {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: init_uniform(rng, inputs, &[inputs, hidden]),
            b1: init_uniform(rng, inputs, &[1, hidden]),
            w2: init_uniform(rng, hidden, &[hidden, inputs]),
            b2: init_uniform(rng, hidden, &[1, inputs]),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[inputs, hidden]),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::zeros(&[hidden, inputs]),
            b2: Tensor::zeros(&[1, inputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Per-subject scores without recording gradients.
    pub fn scores(&self, phenotypes: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let p = tape.constant(phenotypes.clone());
        let s = attention_forward(&mut tape, p, &vars)?;
        Ok(tape.value(s).clone())
    }

    /// The global attention vector for a phenotype matrix.
    pub fn attention(&self, phenotypes: &Tensor) -> Result<Vec<f64>> {
        Ok(aggregate_scores(&self.scores(phenotypes)?))
    }
}

/// `sigmoid(relu(P W1 + b1) W2 + b2)`: one score per subject and phenotype.
pub fn attention_forward(tape: &mut Tape, phenotypes: Var, mlp: &AttentionVars) -> Result<Var> {
    let (p, w1) = (tape.value(phenotypes), tape.value(mlp.w1));
    if p.cols() != w1.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            left: p.shape().to_vec(),
            right: w1.shape().to_vec(),
        });
    }
    let h = tape.matmul(phenotypes, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add_row(o, mlp.b2)?;
    tape.sigmoid(o)
}

/// Column means rescaled so the smallest is 0 and the largest 1; a constant
/// vector of 0.5 when every mean is equal. Differentiated exactly, so the
/// gradient also flows through the selected minimum and maximum.
pub fn aggregate_attention(tape: &mut Tape, scores: Var) -> Result<Var> {
    let means = tape.mean_rows(scores)?;
    let lo = tape.min(means)?;
    let hi = tape.max(means)?;
    let (lv, hv) = (tape.value(lo).data()[0], tape.value(hi).data()[0]);
    if hv - lv <= 0.0 {
        let c = tape.value(means).cols();
        return Ok(tape.constant(Tensor::filled(&[1, c], 0.5)));
    }
    let shifted = tape.sub(means, lo)?;
    let range = tape.sub(hi, lo)?;
    tape.div(shifted, range)
}

/// Plain-value counterpart of [`aggregate_attention`].
pub fn aggregate_scores(scores: &Tensor) -> Vec<f64> {
    let (n, c) = (scores.rows(), scores.cols());
    let mut means = vec![0.0; c];
    for i in 0..n {
        for (m, &x) in means.iter_mut().zip(scores.row_slice(i)) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    minmax(&means)
}

fn minmax(means: &[f64]) -> Vec<f64> {
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; means.len()];
    }
    means.iter().map(|m| (m - lo) / (hi - lo)).collect()
}

/// `F = a ⊙ P` row by row.
pub fn weight_phenotypes(tape: &mut Tape, attention: Var, phenotypes: Var) -> Result<Var> {
    tape.mul_row(phenotypes, attention)
}

pub fn weight_phenotypes_plain(attention: &[f64], phenotypes: &Tensor) -> Result<Tensor> {
    if attention.len() != phenotypes.cols() {
        return Err(Error::ShapeMismatch {
            op: "weight_phenotypes",
            left: phenotypes.shape().to_vec(),
            right: vec![attention.len()],
        });
    }
    let c = attention.len();
    let data = phenotypes
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * attention[i % c])
        .collect();
    Tensor::new(phenotypes.shape().to_vec(), data)
}

/// Trained attention weights with the metadata of each phenotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionVector {
    pub weights: Vec<f64>,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPhenotype {
    pub rank: usize,
    pub index: usize,
    pub name: String,
    pub kind: ColumnKind,
    pub weight: f64,
    pub relevant: Option<bool>,
}

impl AttentionVector {
    pub fn new(weights: Vec<f64>, columns: Vec<Column>) -> Result<Self> {
        if weights.len() != columns.len() {
            return Err(Error::ShapeMismatch {
                op: "attention_vector",
                left: vec![weights.len()],
                right: vec![columns.len()],
            });
        }
        Ok(Self { weights, columns })
    }

    /// Descending weight; equal weights keep column order.
    pub fn rank(&self) -> Vec<RankedPhenotype> {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .enumerate()
            .map(|(rank, i)| RankedPhenotype {
                rank: rank + 1,
                index: i,
                name: self.columns[i].name.clone(),
                kind: self.columns[i].kind,
                weight: self.weights[i],
                relevant: self.columns[i].relevant,
            })
            .collect()
    }

    /// Fraction of the top-`n` ranked phenotypes flagged relevant, where `n`
    /// is the number of relevant phenotypes. `None` without ground truth.
    pub fn precision_at_relevant(&self) -> Option<f64> {
        if self.columns.iter().any(|c| c.relevant.is_none()) {
            return None;
        }
        let n = self.columns.iter().filter(|c| c.relevant == Some(true)).count();
        if n == 0 {
            return None;
        }
        let hits = self.rank().iter().take(n).filter(|r| r.relevant == Some(true)).count();
        Some(hits as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::rng::seeded;
    use alloc::format;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_mlp_scores_half() {
        let mlp = AttentionMlp::zeros(3, 6);
        let s = mlp.scores(&m(2, 3, &[0.1, 0.5, 0.9, 0.3, 0.2, 0.7])).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.5));
        assert_eq!(mlp.attention(&Tensor::zeros(&[2, 3])).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn large_bias_saturates_one_column() {
        let mut mlp = AttentionMlp::zeros(4, 8);
        for i in 0..4 {
            mlp.w1.data_mut()[i * 8 + i] = 1.0;
            mlp.w2.data_mut()[i * 4 + i] = 1.0;
        }
        mlp.b2.data_mut()[3] = 10.0;
        let s = mlp.scores(&m(1, 4, &[0.2, 0.4, 0.6, 0.8])).unwrap();
        assert!(s.data()[3] > 0.99);
    }

    #[test]
    fn column_count_mismatch() {
        let mlp = AttentionMlp::zeros(3, 6);
        assert!(matches!(
            mlp.scores(&Tensor::zeros(&[2, 4])),
            Err(Error::ShapeMismatch {
                op: "attention_forward",
                ..
            })
        ));
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_scores(&m(2, 2, &[0.2, 0.8, 0.4, 0.6])), vec![0.0, 1.0]);
        let mid = aggregate_scores(&m(1, 3, &[0.2, 0.5, 0.8]));
        assert_eq!((mid[0], mid[2]), (0.0, 1.0));
        assert!((mid[1] - 0.5).abs() < 1e-15);
        assert_eq!(
            aggregate_scores(&m(2, 3, &[0.3, 0.3, 0.3, 0.6, 0.6, 0.6])),
            vec![0.5; 3]
        );

        let mut t = Tape::new();
        let s = t.constant(m(2, 2, &[0.2, 0.8, 0.4, 0.6]));
        let a = aggregate_attention(&mut t, s).unwrap();
        assert_eq!(t.value(a).data(), &[0.0, 1.0]);
    }

    #[test]
    fn hadamard_weighting_examples() {
        let p = m(2, 2, &[0.5, 0.9, 0.1, 0.3]);
        assert_eq!(weight_phenotypes_plain(&[1.0, 1.0], &p).unwrap(), p);
        let zero = weight_phenotypes_plain(&[0.0, 0.0], &p).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        let lp = crate::graphgen::log_prob_matrix(&zero, crate::graphgen::DistanceMetric::Euclidean, 1.0).unwrap();
        assert!(lp.data().iter().all(|&x| x == 0.0));
        let w = weight_phenotypes_plain(&[1.0, 0.0], &m(1, 2, &[0.5, 0.9])).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0]);
        assert!(weight_phenotypes_plain(&[1.0], &p).is_err());
    }

    #[test]
    fn weighting_is_linear_in_attention() {
        let p = m(2, 3, &[0.5, 0.9, 0.1, 0.3, 0.7, 0.2]);
        let (a1, a2) = ([0.1, 0.7, 0.3], [0.5, 0.2, 0.9]);
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = weight_phenotypes_plain(&sum, &p).unwrap();
        let r1 = weight_phenotypes_plain(&a1, &p).unwrap();
        let r2 = weight_phenotypes_plain(&a2, &p).unwrap();
        for i in 0..6 {
            assert!((lhs.data()[i] - r1.data()[i] - r2.data()[i]).abs() < 1e-15);
        }
    }

    fn columns(n: usize) -> Vec<Column> {
        (0..n)
            .map(|i| Column {
                name: format!("c{i}"),
                kind: ColumnKind::NonImaging,
                relevant: Some(i % 2 == 1),
            })
            .collect()
    }

    #[test]
    fn ranking_is_stable_and_descending() {
        let av = AttentionVector::new(vec![0.1, 0.9, 0.5], columns(3)).unwrap();
        let order: Vec<usize> = av.rank().iter().map(|r| r.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
        let flat = AttentionVector::new(vec![0.5; 4], columns(4)).unwrap();
        let order: Vec<usize> = flat.rank().iter().map(|r| r.index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        // relevant columns are 1 and 3; ranking 1, 2, 0, 3 gives 1 hit in top 2
        let av = AttentionVector::new(vec![0.1, 0.9, 0.5, 0.0], columns(4)).unwrap();
        assert_eq!(av.precision_at_relevant(), Some(0.5));
    }

    #[test]
    fn mean_score_gradient_matches_finite_differences() {
        let mut rng = seeded(17);
        let mlp = AttentionMlp::new(5, 10, &mut rng);
        let p = init_uniform(&mut rng, 1, &[7, 5]);
        let params: Vec<Tensor> = mlp.tensors().iter().map(|t| (*t).clone()).collect();
        let report = grad_check(
            &params,
            |t, v| {
                let vars = AttentionVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                let pv = t.constant(p.clone());
                let s = attention_forward(t, pv, &vars)?;
                t.mean(s)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn aggregated_attention_gradient_matches_finite_differences() {
        let mut rng = seeded(18);
        let mlp = AttentionMlp::new(4, 8, &mut rng);
        let p = init_uniform(&mut rng, 1, &[6, 4]);
        let target = init_uniform(&mut rng, 1, &[6, 4]);
        let params: Vec<Tensor> = mlp.tensors().iter().map(|t| (*t).clone()).collect();
        let report = grad_check(
            &params,
            |t, v| {
                let vars = AttentionVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                let pv = t.constant(p.clone());
                let s = attention_forward(t, pv, &vars)?;
                let a = aggregate_attention(t, s)?;
                let f = weight_phenotypes(t, a, pv)?;
                let tv = t.constant(target.clone());
                let d = t.sub(f, tv)?;
                let sq = t.square(d)?;
                t.sum(sq)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
