//! The node predictor (one graph convolution, one dense layer, task head)
//! and the loss terms that train it and the graph sampler.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::init_uniform;
use crate::graphgen::NormalizedAdjacency;
use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// `H1 = relu(Â X W1)`, `H2 = relu(H1 W2 + b2)`, `out = H2 W3 + b3`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub w1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub w1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl GcnModel {
    pub fn new(features: usize, conv: usize, dense: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: init_uniform(rng, features, &[features, conv]),
            w2: init_uniform(rng, conv, &[conv, dense]),
            b2: init_uniform(rng, conv, &[1, dense]),
            w3: init_uniform(rng, dense, &[dense, outputs]),
            b3: init_uniform(rng, dense, &[1, outputs]),
        }
    }

    pub fn zeros(features: usize, conv: usize, dense: usize, outputs: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[features, conv]),
            w2: Tensor::zeros(&[conv, dense]),
            b2: Tensor::zeros(&[1, dense]),
            w3: Tensor::zeros(&[dense, outputs]),
            b3: Tensor::zeros(&[1, outputs]),
        }
    }

    pub fn outputs(&self) -> usize {
        self.w3.cols()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GcnVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        GcnVars {
            w1: leaf(&self.w1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
            w3: leaf(&self.w3),
            b3: leaf(&self.b3),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.w1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.w1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    /// Forward pass without gradients: `N x outputs` predictions.
    pub fn predict(&self, adjacency: &NormalizedAdjacency, x: &Tensor) -> Result<Tensor> {
        if x.rows() != adjacency.n() {
            return Err(Error::ShapeMismatch {
                op: "gcn_forward",
                left: vec![adjacency.n(), adjacency.n()],
                right: x.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let ax = tape.constant(adjacency.propagate(x));
        let out = gcn_forward(&mut tape, ax, &vars)?;
        Ok(tape.value(out).clone())
    }
}

/// GCN forward from the propagated features `Â X` (`N x M`).
pub fn gcn_forward(tape: &mut Tape, propagated: Var, gcn: &GcnVars) -> Result<Var> {
    let (x, w1) = (tape.value(propagated), tape.value(gcn.w1));
    if x.cols() != w1.rows() {
        return Err(Error::ShapeMismatch {
            op: "gcn_forward",
            left: x.shape().to_vec(),
            right: w1.shape().to_vec(),
        });
    }
    let h1 = tape.matmul(propagated, gcn.w1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, gcn.w2)?;
    let h2 = tape.add_row(h2, gcn.b2)?;
    let h2 = tape.relu(h2)?;
    let out = tape.matmul(h2, gcn.w3)?;
    tape.add_row(out, gcn.b3)
}

/// Mean Huber loss of `pred - y` over the listed nodes. `pred` is `N x 1`.
pub fn huber_loss(tape: &mut Tape, pred: Var, labels: &[f64], nodes: &[usize], delta: f64) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::Empty("loss mask"));
    }
    let picked = tape.gather_rows(pred, nodes)?;
    let target = Tensor::column(nodes.iter().map(|&i| labels[i]).collect())?;
    let target = tape.constant(target);
    let residual = tape.sub(picked, target)?;
    let h = tape.huber(residual, delta)?;
    tape.mean(h)
}

/// Mean negative log-softmax of the true class over the listed nodes.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, classes: &[usize], nodes: &[usize]) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::Empty("loss mask"));
    }
    let picked = tape.gather_rows(logits, nodes)?;
    let logp = tape.log_softmax_rows(picked)?;
    let truth: Vec<usize> = nodes.iter().map(|&i| classes[i]).collect();
    let chosen = tape.pick_cols(logp, &truth)?;
    let mean = tape.mean(chosen)?;
    tape.neg(mean)
}

/// Reward boundary: the null model's error.
///
/// Regression: mean absolute deviation of the training labels from their
/// mean (the error of always predicting the training mean). Classification:
/// the error rate of a uniform random guess, `1 - 1/n_classes`.
pub fn null_epsilon(train_labels: &[f64], task: Task, n_classes: usize) -> Result<f64> {
    match task {
        Task::Regression => {
            if train_labels.is_empty() {
                return Err(Error::Empty("training labels"));
            }
            let n = train_labels.len() as f64;
            let mean = train_labels.iter().sum::<f64>() / n;
            Ok(train_labels.iter().map(|y| (y - mean).abs()).sum::<f64>() / n)
        }
        Task::Classification => {
            if n_classes < 2 {
                return Err(Error::InvalidConfig("need at least 2 classes".into()));
            }
            Ok(1.0 - 1.0 / n_classes as f64)
        }
    }
}

/// `|y - ŷ| - ε`: negative when the prediction beats the null model.
pub fn regression_reward(label: f64, prediction: f64, epsilon: f64) -> f64 {
    (label - prediction).abs() - epsilon
}

/// `(1 - [correct]) - ε`: negative exactly when the prediction is correct.
pub fn classification_reward(correct: bool, epsilon: f64) -> f64 {
    let error = if correct { 0.0 } else { 1.0 };
    error - epsilon
}

/// `Σ ρ_src · log p` over edges. `log_p` is the `E x 1` column of the edges
/// whose sources are listed in `sources`; rewards are constants.
pub fn graph_loss(tape: &mut Tape, log_p: Var, sources: &[usize], node_rewards: &[f64]) -> Result<Var> {
    if sources.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if tape.value(log_p).numel() != sources.len() {
        return Err(Error::ShapeMismatch {
            op: "graph_loss",
            left: tape.value(log_p).shape().to_vec(),
            right: vec![sources.len()],
        });
    }
    let rho = Tensor::column(sources.iter().map(|&i| node_rewards[i]).collect())?;
    let rho = tape.constant(rho);
    let weighted = tape.mul(log_p, rho)?;
    tape.sum(weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gcn: f64,
    pub graph: f64,
    pub lambda: f64,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.gcn.is_finite() && self.graph.is_finite()
    }
}

/// `L = L_GCN + λ L_graph` on the tape. Returns the loss variable and its
/// breakdown; `rewards` only feeds the statistics.
pub fn total_loss(
    tape: &mut Tape,
    gcn_loss: Var,
    graph_loss: Var,
    lambda: f64,
    rewards: &[f64],
) -> Result<(Var, LossBreakdown)> {
    let g = tape.value(gcn_loss).item().unwrap_or(f64::NAN);
    let r = tape.value(graph_loss).item().unwrap_or(f64::NAN);
    let scaled = tape.scale(graph_loss, lambda)?;
    let total = tape.add(gcn_loss, scaled)?;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &x in rewards {
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x;
    }
    let mean = if rewards.is_empty() {
        0.0
    } else {
        sum / rewards.len() as f64
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).data()[0],
        gcn: g,
        graph: r,
        lambda,
        reward_mean: mean,
        reward_min: if rewards.is_empty() { 0.0 } else { lo },
        reward_max: if rewards.is_empty() { 0.0 } else { hi },
    };
    Ok((total, breakdown))
}

/// Plain-value `L_GCN + λ L_graph` with the finiteness contract.
pub fn combine_losses(gcn: f64, graph: f64, lambda: f64) -> Result<f64> {
    let total = gcn + lambda * graph;
    if !total.is_finite() || !gcn.is_finite() || !graph.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            total,
            gcn,
            graph,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::symmetrize;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::rng::seeded;

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        init_uniform(rng, 1, shape)
    }

    #[test]
    fn empty_graph_reduces_to_mlp() {
        let mut rng = seeded(1);
        let model = GcnModel::new(3, 8, 4, 1, &mut rng);
        let x = random(&mut rng, &[5, 3]);
        let pred = model.predict(&symmetrize(&[], 5), &x).unwrap();
        // MLP on raw features
        let mut t = Tape::new();
        let v = model.register(&mut t, false);
        let xv = t.constant(x.clone());
        let out = gcn_forward(&mut t, xv, &v).unwrap();
        assert_eq!(t.value(out), &pred);
    }

    #[test]
    fn zero_weights_predict_head_bias() {
        let mut model = GcnModel::zeros(3, 8, 4, 1);
        model.b3.data_mut()[0] = 61.5;
        let x = Tensor::filled(&[4, 3], 0.7);
        let pred = model.predict(&symmetrize(&[(0, 1), (2, 3)], 4), &x).unwrap();
        assert!(pred.data().iter().all(|&p| p == 61.5));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = GcnModel::zeros(3, 8, 4, 1);
        assert!(model.predict(&symmetrize(&[], 4), &Tensor::zeros(&[4, 2])).is_err());
        assert!(model.predict(&symmetrize(&[], 5), &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = seeded(2);
        let model = GcnModel::new(3, 16, 8, 2, &mut rng);
        let n = 7;
        let x = random(&mut rng, &[n, 3]);
        let edges = vec![(0, 1), (1, 2), (3, 4), (5, 6), (6, 0), (2, 5)];
        let perm = [3, 6, 0, 5, 1, 2, 4]; // node i -> perm[i]
        let pred = model.predict(&symmetrize(&edges, n), &x).unwrap();

        let mut px = vec![0.0; n * 3];
        for i in 0..n {
            px[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(x.row_slice(i));
        }
        let pedges: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let ppred = model
            .predict(&symmetrize(&pedges, n), &Tensor::matrix(n, 3, px).unwrap())
            .unwrap();
        for i in 0..n {
            for c in 0..2 {
                assert!((pred.get(i, c) - ppred.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    fn huber_of(residuals: &[f64], delta: f64) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(Tensor::column(residuals.to_vec()).unwrap());
        let nodes: Vec<usize> = (0..residuals.len()).collect();
        let l = huber_loss(&mut t, p, &vec![0.0; residuals.len()], &nodes, delta).unwrap();
        t.value(l).data()[0]
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_of(&[0.0, 0.0], 1.0), 0.0);
        assert_eq!(huber_of(&[0.5], 1.0), 0.125);
        assert_eq!(huber_of(&[3.0], 1.0), 2.5);
        let mut t = Tape::new();
        let p = t.constant(Tensor::column(vec![1.0]).unwrap());
        assert_eq!(huber_loss(&mut t, p, &[0.0], &[], 1.0), Err(Error::Empty("loss mask")));
    }

    #[test]
    fn huber_is_c1_at_delta() {
        let delta = 1.0;
        let h = 1e-7;
        let slope = |e: f64| {
            let mut t = Tape::new();
            let p = t.param(Tensor::column(vec![e]).unwrap());
            let l = huber_loss(&mut t, p, &[0.0], &[0], delta).unwrap();
            t.backward(l).unwrap();
            t.grad(p).unwrap().data()[0]
        };
        let (below, above) = (huber_of(&[delta - h], delta), huber_of(&[delta + h], delta));
        assert!((above - below).abs() < 3.0 * h);
        assert!((slope(delta - h) - slope(delta + h)).abs() < 3.0 * h);
    }

    fn ce_of(logits: &[f64], classes: &[usize]) -> f64 {
        let n = classes.len();
        let c = logits.len() / n;
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(n, c, logits.to_vec()).unwrap());
        let nodes: Vec<usize> = (0..n).collect();
        let loss = cross_entropy_loss(&mut t, l, classes, &nodes).unwrap();
        t.value(loss).data()[0]
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = ce_of(&[0.3; 8], &[1, 3]);
        assert!((uniform - libm::log(4.0)).abs() < 1e-12);
        let confident = ce_of(&[5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0], &[0, 2]);
        assert!(confident < libm::log(4.0));
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = seeded(3);
        let logits = random(&mut rng, &[5, 4]);
        let classes = [0, 3, 1, 1, 2];
        let report = grad_check(
            &[logits],
            |t, v| cross_entropy_loss(t, v[0], &classes, &[0, 1, 2, 4]),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(null_epsilon(&[50.0, 60.0], Task::Regression, 4).unwrap(), 5.0);
        assert_eq!(null_epsilon(&[70.0; 5], Task::Regression, 4).unwrap(), 0.0);
        assert_eq!(null_epsilon(&[1.0], Task::Classification, 4).unwrap(), 0.75);
        assert!(null_epsilon(&[], Task::Regression, 4).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(regression_reward(60.0, 54.0, 6.0), 0.0);
        assert_eq!(regression_reward(60.0, 60.0, 6.0), -6.0);
        assert_eq!(classification_reward(true, 0.75), -0.75);
        assert_eq!(classification_reward(false, 0.75), 0.25);
    }

    #[test]
    fn chance_classifier_has_zero_expected_reward() {
        // enumerate every (truth, guess) pair of a uniform guesser over 4 classes
        let eps = null_epsilon(&[0.0], Task::Classification, 4).unwrap();
        let mut total = 0.0;
        for truth in 0..4 {
            for guess in 0..4 {
                total += classification_reward(truth == guess, eps) / 16.0;
            }
        }
        assert!(total.abs() < 1e-15);
    }

    fn one_edge(rho: f64, log_p: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let lp = t.param(Tensor::column(vec![log_p]).unwrap());
        let loss = graph_loss(&mut t, lp, &[0], &[rho]).unwrap();
        t.backward(loss).unwrap();
        (t.value(loss).data()[0], t.grad(lp).unwrap().data()[0])
    }

    #[test]
    fn graph_loss_sign_contract() {
        // good edge: loss +2; gradient on log p is ρ = -1 so descent raises p
        assert_eq!(one_edge(-1.0, -2.0), (2.0, -1.0));
        // bad edge: loss -2; descent lowers p
        assert_eq!(one_edge(1.0, -2.0), (-2.0, 1.0));
        assert_eq!(one_edge(0.0, -2.0), (0.0, 0.0));
        let mut t = Tape::new();
        let lp = t.param(Tensor::zeros(&[0, 1]));
        let loss = graph_loss(&mut t, lp, &[], &[]).unwrap();
        assert_eq!(t.value(loss).item(), Some(0.0));
    }

    #[test]
    fn total_loss_is_additive() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let (a, b): (f64, f64) = (rng.random::<f64>() * 10.0, rng.random::<f64>() * 100.0 - 50.0);
            let mut t = Tape::new();
            let ga = t.constant(Tensor::scalar(a));
            let gb = t.constant(Tensor::scalar(b));
            let (_, br) = total_loss(&mut t, ga, gb, 1.0, &[]).unwrap();
            assert_eq!(br.total, br.gcn + br.graph);
        }
        assert_eq!(combine_losses(2.0, 0.5, 1.0).unwrap(), 2.5);
        assert_eq!(combine_losses(2.0, 0.5, 0.0).unwrap(), 2.0);
        assert!(combine_losses(f64::NAN, 0.5, 1.0).is_err());
    }
}
