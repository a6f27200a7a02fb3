//! Graph-free linear baselines and the static kNN-graph GCN.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gcn::Task;
use crate::graphgen::{knn_static_graph, DistanceMetric, Edge};
use crate::metrics::{evaluate_classification, evaluate_regression};
use crate::numerics::{log_sum_exp, Tensor};
use crate::trainer::{run_experiment, GraphSource, MetricsRecord, RunResult, TrainConfig, TrainingData};
use crate::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-3;
/// Gradient-norm tolerance of the logistic fit.
pub const LOGISTIC_TOLERANCE: f64 = 1e-6;
const LOGISTIC_MAX_ITERS: usize = 200;

/// `outputs = X W + b`; for the logistic model the outputs are class
/// probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub task: Task,
    /// `M x 1` (regression) or `M x C` (logistic), row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub features: usize,
}

impl LinearModel {
    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.features {
            return Err(Error::ShapeMismatch {
                op: "linear_predict",
                left: vec![x.rows(), x.cols()],
                right: vec![self.features, self.outputs()],
            });
        }
        let c = self.outputs();
        let mut out = Vec::with_capacity(x.rows() * c);
        for i in 0..x.rows() {
            let row = x.row_slice(i);
            let logits: Vec<f64> = (0..c)
                .map(|k| {
                    self.bias[k]
                        + row
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * self.weights[j * c + k])
                            .sum::<f64>()
                })
                .collect();
            match self.task {
                Task::Regression => out.extend(logits),
                Task::Classification => {
                    let lse = log_sum_exp(&logits);
                    out.extend(logits.iter().map(|l| libm::exp(l - lse)));
                }
            }
        }
        Tensor::matrix(x.rows(), c, out)
    }
}

fn rows_of(x: &Tensor, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j))
}

/// Ridge regression with an unpenalized intercept: minimizes
/// `|X w + b - y|^2 + lambda |w|^2` in closed form on centered data.
pub fn linear_fit(x: &Tensor, y: &[f64], rows: &[usize], lambda: f64) -> Result<LinearModel> {
    if rows.len() < 2 {
        return Err(Error::Degenerate(format!("ridge fit needs 2 rows, got {}", rows.len())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(
            "ridge lambda must be finite and non-negative".into(),
        ));
    }
    let m = x.cols();
    let mut xm = rows_of(x, rows);
    let yv = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let x_mean = xm.row_mean();
    let y_mean = yv.mean();
    for mut r in xm.row_iter_mut() {
        r -= &x_mean;
    }
    let yc = yv.add_scalar(-y_mean);
    let gram = xm.tr_mul(&xm) + DMatrix::identity(m, m) * lambda;
    let rhs = xm.tr_mul(&yc);
    let singular = || {
        Error::Singular(format!(
            "normal equations are singular at ridge lambda = {lambda}; use a positive ridge penalty"
        ))
    };
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    if chol.l().diagonal().iter().any(|d| d * d <= 1e-12 * scale) {
        return Err(singular());
    }
    let w = chol.solve(&rhs);
    let bias = y_mean - (x_mean * &w)[(0, 0)];
    Ok(LinearModel {
        task: Task::Regression,
        weights: w.iter().copied().collect(),
        bias: vec![bias],
        features: m,
    })
}

/// Relative residual `|(Xc'Xc + lambda I) w - Xc'yc| / |Xc'yc|` of a ridge
/// solution.
pub fn normal_equation_residual(model: &LinearModel, x: &Tensor, y: &[f64], rows: &[usize], lambda: f64) -> f64 {
    let m = x.cols();
    let mut xm = rows_of(x, rows);
    let yv = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let x_mean = xm.row_mean();
    for mut r in xm.row_iter_mut() {
        r -= &x_mean;
    }
    let yc = yv.add_scalar(-yv.mean());
    let w = DVector::from_column_slice(&model.weights);
    let rhs = xm.tr_mul(&yc);
    let lhs = (xm.tr_mul(&xm) + DMatrix::identity(m, m) * lambda) * w;
    (lhs - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE)
}

/// Multinomial logistic regression minimizing mean cross-entropy plus
/// `lambda/2 |θ|^2` over weights and biases, by damped Newton steps with an
/// Armijo backtracking line search until the gradient norm is at most
/// `LOGISTIC_TOLERANCE`.
pub fn logistic_fit(
    x: &Tensor,
    classes: &[usize],
    rows: &[usize],
    n_classes: usize,
    lambda: f64,
) -> Result<LinearModel> {
    if rows.len() < 2 {
        return Err(Error::Degenerate(format!(
            "logistic fit needs 2 rows, got {}",
            rows.len()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(
            "logistic regression needs a positive penalty".into(),
        ));
    }
    let (m, c) = (x.cols(), n_classes);
    let a = m + 1; // augmented with the constant column
    let dim = a * c;
    let n = rows.len() as f64;
    let xa: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let mut r = x.row_slice(i).to_vec();
            r.push(1.0);
            r
        })
        .collect();
    let ys: Vec<usize> = rows.iter().map(|&i| classes[i]).collect();
    if ys.iter().any(|&y| y >= c) {
        return Err(Error::InvalidConfig(format!(
            "class label out of range for {c} classes"
        )));
    }

    let probs = |theta: &[f64], row: &[f64]| -> Vec<f64> {
        let logits: Vec<f64> = (0..c)
            .map(|k| row.iter().enumerate().map(|(j, v)| v * theta[j * c + k]).sum())
            .collect();
        let lse = log_sum_exp(&logits);
        logits.iter().map(|l| libm::exp(l - lse)).collect()
    };
    let objective = |theta: &[f64]| -> f64 {
        let ce: f64 = xa
            .iter()
            .zip(&ys)
            .map(|(row, &y)| -libm::log(probs(theta, row)[y].max(f64::MIN_POSITIVE)))
            .sum();
        ce / n + 0.5 * lambda * theta.iter().map(|t| t * t).sum::<f64>()
    };

    let mut theta = vec![0.0; dim];
    let mut value = objective(&theta);
    for _ in 0..LOGISTIC_MAX_ITERS {
        let mut grad = DVector::from_iterator(dim, theta.iter().map(|t| lambda * t));
        let mut hess = DMatrix::identity(dim, dim) * lambda;
        for (row, &y) in xa.iter().zip(&ys) {
            let p = probs(&theta, row);
            for (j, &xj) in row.iter().enumerate() {
                for k in 0..c {
                    let target = if k == y { 1.0 } else { 0.0 };
                    grad[j * c + k] += xj * (p[k] - target) / n;
                }
            }
            for (j, &xj) in row.iter().enumerate() {
                for (l, &xl) in row.iter().enumerate().skip(j) {
                    let xx = xj * xl / n;
                    for k in 0..c {
                        for q in 0..c {
                            let cov = if k == q { p[k] * (1.0 - p[k]) } else { -p[k] * p[q] };
                            hess[(j * c + k, l * c + q)] += xx * cov;
                        }
                    }
                }
            }
        }
        if grad.norm() <= LOGISTIC_TOLERANCE {
            return Ok(split_theta(&theta, m, c));
        }
        hess.fill_lower_triangle_with_upper_triangle();
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::Singular("logistic Hessian lost definiteness".into()))?;
        let step = chol.solve(&(-&grad));
        let slope = grad.dot(&step);
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + alpha * s).collect();
            let v = objective(&trial);
            if v <= value + 1e-4 * alpha * slope || alpha < 1e-10 {
                theta = trial;
                value = v;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(Error::Degenerate(format!(
        "logistic regression did not reach gradient norm {LOGISTIC_TOLERANCE} in {LOGISTIC_MAX_ITERS} Newton steps"
    )))
}

fn split_theta(theta: &[f64], m: usize, c: usize) -> LinearModel {
    LinearModel {
        task: Task::Classification,
        weights: theta[..m * c].to_vec(),
        bias: theta[m * c..].to_vec(),
        features: m,
    }
}

/// Linear (regression) or logistic (classification) baseline on the node
/// features, evaluated on the test split.
pub fn linear_experiment(data: &TrainingData, cfg: &TrainConfig, lambda: f64) -> Result<(LinearModel, MetricsRecord)> {
    let (model, method) = match cfg.task {
        Task::Regression => (linear_fit(&data.features, &data.labels, &data.train, lambda)?, "linear"),
        Task::Classification => {
            let classes = data
                .classes
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("classification needs class labels".into()))?;
            (
                logistic_fit(&data.features, classes, &data.train, cfg.n_classes, lambda)?,
                "logistic",
            )
        }
    };
    let out = model.predict(&data.features)?;
    let mut record = MetricsRecord::empty(method, cfg.task, cfg.seed);
    match cfg.task {
        Task::Regression => {
            let p: Vec<f64> = out.data().to_vec();
            let m = evaluate_regression(&p, &data.labels, &data.test)?;
            record.mae = Some(m.mae);
            record.r = m.r;
        }
        Task::Classification => {
            let classes = data.classes.as_deref().expect("checked above");
            let m = evaluate_classification(&out, classes, &data.test)?;
            record.accuracy = Some(m.accuracy);
            record.macro_auc = m.macro_auc;
            record.macro_f1 = Some(m.macro_f1);
        }
    }
    Ok((model, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    NodeFeatures,
    Phenotypes,
}

impl FeatureSource {
    pub fn method_name(self) -> &'static str {
        match self {
            Self::NodeFeatures => "static_node_features",
            Self::Phenotypes => "static_phenotypes",
        }
    }
}

/// The fixed kNN graph of a static baseline.
pub fn static_graph(data: &TrainingData, source: FeatureSource, k: usize, metric: DistanceMetric) -> Result<Vec<Edge>> {
    let m = match source {
        FeatureSource::NodeFeatures => &data.features,
        FeatureSource::Phenotypes => &data.phenotypes,
    };
    knn_static_graph(m, k, metric)
}

/// GCN on one kNN graph built from `source`, trained without the graph loss.
pub fn static_gcn_experiment(
    data: &TrainingData,
    source: FeatureSource,
    k: usize,
    metric: DistanceMetric,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    let edges = static_graph(data, source, k, metric)?;
    let cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let mut run = run_experiment(data, &GraphSource::Static(edges), &cfg)?;
    run.record.method = source.method_name().into();
    Ok(run)
}
