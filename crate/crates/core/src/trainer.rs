//! Joint training of attention, temperature and GCN; AdamW; stochastic
//! inference averaging; evaluation records.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate_attention, attention_forward, weight_phenotypes, weight_phenotypes_plain, AttentionMlp, AttentionVars,
    AttentionVector,
};
use crate::dataio::{Column, PopulationDataset, Split};
use crate::gcn::{
    classification_reward, cross_entropy_loss, gcn_forward, graph_loss, huber_loss, null_epsilon, regression_reward,
    total_loss, GcnModel, GcnVars, LossBreakdown, Task,
};
use crate::graphgen::{
    gumbel_topk_sample, homophily_score, log_prob_matrix, normalize, random_graph, taped_edge_log_probs,
    DistanceMetric, Edge, HomophilyMode, NormalizedAdjacency, Propagation,
};
use crate::metrics::{argmax, evaluate_classification, evaluate_regression, ClassificationMetrics, RegressionMetrics};
use crate::numerics::{log_sum_exp, Tape, Tensor, Var};
use crate::rng::{stream, RunRng};
use crate::{Error, Result};

/// RNG stream ids derived from a run seed.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const INFER_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 never stops.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    /// Sampled out-edges per node.
    pub k: usize,
    pub metric: DistanceMetric,
    pub propagation: Propagation,
    pub inference_samples: usize,
    pub lambda: f64,
    pub huber_delta: f64,
    /// Attention hidden width; `None` means twice the phenotype count.
    pub attention_hidden: Option<usize>,
    pub conv_units: usize,
    pub dense_units: usize,
    pub n_classes: usize,
    pub initial_log_temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            learning_rate: 0.005,
            epochs: 300,
            patience: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            k: 5,
            metric: DistanceMetric::Euclidean,
            propagation: Propagation::Symmetric,
            inference_samples: 8,
            lambda: 1.0,
            huber_delta: 1.0,
            attention_hidden: None,
            conv_units: 512,
            dense_units: 128,
            n_classes: 4,
            initial_log_temperature: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.inference_samples == 0 {
            return bad("inference_samples must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_epsilon must be positive and weight_decay non-negative");
        }
        if !self.lambda.is_finite() || !(self.huber_delta > 0.0) {
            return bad("lambda must be finite and huber_delta positive");
        }
        if self.conv_units == 0 || self.dense_units == 0 || self.attention_hidden == Some(0) {
            return bad("layer widths must be positive");
        }
        if self.task == Task::Classification && self.n_classes < 2 {
            return bad("classification needs n_classes >= 2");
        }
        if !self.initial_log_temperature.is_finite() {
            return bad("initial_log_temperature must be finite");
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification => self.n_classes,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One AdamW update. Weight decay shrinks the parameter directly and never
/// enters the moment estimates.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() {
        return Err(Error::InvalidConfig(
            "optimizer state belongs to a different parameter set".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(h.beta1, t as f64);
    let c2 = 1.0 - libm::pow(h.beta2, t as f64);
    let shrink = 1.0 - h.learning_rate * h.weight_decay;
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x = *x * shrink - h.learning_rate * mhat / (libm::sqrt(vhat) + h.epsilon);
        }
        if !p.all_finite() {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

/// How the graph fed to the GCN is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    /// Learned attention and temperature, Gumbel-Top-k resampled every pass.
    Adaptive,
    /// Fixed attention weights; only the temperature and GCN are trained.
    FixedAttention(Vec<f64>),
    /// One graph for the whole run; no graph loss.
    Static(Vec<Edge>),
    /// A fresh uniformly random k-out graph every pass; no graph loss.
    Random,
}

impl GraphSource {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::FixedAttention(_) => "fixed_attention",
            Self::Static(_) => "static",
            Self::Random => "random",
        }
    }

    fn learns_attention(&self) -> bool {
        matches!(self, Self::Adaptive)
    }

    fn samples_kernel(&self) -> bool {
        matches!(self, Self::Adaptive | Self::FixedAttention(_))
    }
}

/// All trainable state: attention MLP (θ), GCN (ψ) and `τ = log t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attention: AttentionMlp,
    pub gcn: GcnModel,
    pub log_temperature: Tensor,
}

pub const PARAM_NAMES: [&str; 10] = [
    "attention.w1",
    "attention.b1",
    "attention.w2",
    "attention.b2",
    "gcn.w1",
    "gcn.w2",
    "gcn.b2",
    "gcn.w3",
    "gcn.b3",
    "log_temperature",
];

impl ModelParams {
    /// Seeded initialization. The regression head bias starts at the mean
    /// training label so the output begins on the label scale.
    pub fn init(cfg: &TrainConfig, phenotypes: usize, features: usize, label_mean: f64, rng: &mut impl Rng) -> Self {
        let hidden = cfg.attention_hidden.unwrap_or(2 * phenotypes);
        let attention = AttentionMlp::new(phenotypes, hidden, rng);
        let mut gcn = GcnModel::new(features, cfg.conv_units, cfg.dense_units, cfg.outputs(), rng);
        if cfg.task == Task::Regression {
            gcn.b3.data_mut()[0] = label_mean;
        }
        Self {
            attention,
            gcn,
            log_temperature: Tensor::scalar(cfg.initial_log_temperature),
        }
    }

    pub fn temperature(&self) -> f64 {
        libm::exp(self.log_temperature.data()[0])
    }

    /// Parameter tensors in `PARAM_NAMES` order.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.attention.tensors().into_iter().cloned().collect();
        out.extend(self.gcn.tensors().into_iter().cloned());
        out.push(self.log_temperature.clone());
        out
    }

    pub fn from_flat(mut flat: Vec<Tensor>) -> Result<Self> {
        if flat.len() != PARAM_NAMES.len() {
            return Err(Error::ShapeMismatch {
                op: "from_flat",
                left: vec![PARAM_NAMES.len()],
                right: vec![flat.len()],
            });
        }
        let log_temperature = flat.pop().expect("length checked");
        if !log_temperature.is_scalar() {
            return Err(Error::NotScalar {
                shape: log_temperature.shape().to_vec(),
            });
        }
        let mut it = flat.into_iter();
        let mut next = || it.next().expect("length checked");
        let attention = AttentionMlp {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let gcn = GcnModel {
            w1: next(),
            w2: next(),
            b2: next(),
            w3: next(),
            b3: next(),
        };
        let p = attention.inputs();
        let (h, f, c, d, o) = (
            attention.hidden(),
            gcn.w1.rows(),
            gcn.w1.cols(),
            gcn.w2.cols(),
            gcn.outputs(),
        );
        let expected: [[usize; 2]; 9] = [[p, h], [1, h], [h, p], [1, p], [f, c], [c, d], [1, d], [d, o], [1, o]];
        let actual = attention.tensors().into_iter().chain(gcn.tensors());
        for (want, got) in expected.iter().zip(actual) {
            if got.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "from_flat",
                    left: want.to_vec(),
                    right: got.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            attention,
            gcn,
            log_temperature,
        })
    }

    fn trainable_mut(&mut self, source: &GraphSource) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if source.learns_attention() {
            out.extend(self.attention.tensors_mut());
        }
        out.extend(self.gcn.tensors_mut());
        if source.samples_kernel() {
            out.push(&mut self.log_temperature);
        }
        out
    }

    /// Registers the parameters on a tape; those the source does not train
    /// become constants.
    pub fn register(&self, tape: &mut Tape, source: &GraphSource) -> ParamVars {
        let attention = source.learns_attention().then(|| self.attention.register(tape, true));
        let gcn = self.gcn.register(tape, true);
        let log_temperature = if source.samples_kernel() {
            tape.param(self.log_temperature.clone())
        } else {
            tape.constant(self.log_temperature.clone())
        };
        ParamVars {
            attention,
            gcn,
            log_temperature,
        }
    }

    /// Global attention weights for the phenotypes under `source`.
    pub fn attention_weights(&self, phenotypes: &Tensor, source: &GraphSource) -> Result<Option<Vec<f64>>> {
        match source {
            GraphSource::Adaptive => self.attention.attention(phenotypes).map(Some),
            GraphSource::FixedAttention(a) => Ok(Some(a.clone())),
            _ => Ok(None),
        }
    }

    pub fn attention_vector(&self, data: &TrainingData) -> Result<AttentionVector> {
        AttentionVector::new(self.attention.attention(&data.phenotypes)?, data.phenotype_info.clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub attention: Option<AttentionVars>,
    pub gcn: GcnVars,
    pub log_temperature: Var,
}

impl ParamVars {
    /// Builds from ten leaves in `PARAM_NAMES` order.
    pub fn from_flat(vars: &[Var]) -> Result<Self> {
        if vars.len() != PARAM_NAMES.len() {
            return Err(Error::ShapeMismatch {
                op: "from_flat",
                left: vec![PARAM_NAMES.len()],
                right: vec![vars.len()],
            });
        }
        Ok(Self {
            attention: Some(AttentionVars {
                w1: vars[0],
                b1: vars[1],
                w2: vars[2],
                b2: vars[3],
            }),
            gcn: GcnVars {
                w1: vars[4],
                w2: vars[5],
                b2: vars[6],
                w3: vars[7],
                b3: vars[8],
            },
            log_temperature: vars[9],
        })
    }

    fn trainable(&self, source: &GraphSource) -> Vec<Var> {
        let mut out = Vec::new();
        if let (true, Some(a)) = (source.learns_attention(), self.attention) {
            out.extend([a.w1, a.b1, a.w2, a.b2]);
        }
        let g = self.gcn;
        out.extend([g.w1, g.w2, g.b2, g.w3, g.b3]);
        if source.samples_kernel() {
            out.push(self.log_temperature);
        }
        out
    }
}

/// Everything a run reads from a dataset, in the layout the model wants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub phenotypes: Tensor,
    pub phenotype_info: Vec<Column>,
    pub features: Tensor,
    pub labels: Vec<f64>,
    pub classes: Option<Vec<usize>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl TrainingData {
    pub fn from_dataset(ds: &PopulationDataset) -> Result<Self> {
        if ds.splits().is_none() {
            return Err(Error::InvalidConfig("dataset has no split".into()));
        }
        let data = Self {
            phenotypes: ds.phenotypes(),
            phenotype_info: ds.phenotype_info(),
            features: ds.features().clone(),
            labels: ds.labels().to_vec(),
            classes: ds.classes().map(<[usize]>::to_vec),
            train: ds.indices(Split::Train),
            val: ds.indices(Split::Val),
            test: ds.indices(Split::Test),
        };
        if data.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    fn classes_for(&self, task: Task) -> Result<&[usize]> {
        match (task, &self.classes) {
            (Task::Classification, Some(c)) => Ok(c),
            (Task::Classification, None) => Err(Error::InvalidConfig("classification needs class labels".into())),
            (Task::Regression, _) => Ok(&[]),
        }
    }

    pub fn train_labels(&self) -> Vec<f64> {
        self.train.iter().map(|&i| self.labels[i]).collect()
    }

    /// Null-model ε for the configured task.
    pub fn epsilon(&self, cfg: &TrainConfig) -> Result<f64> {
        null_epsilon(&self.train_labels(), cfg.task, cfg.n_classes)
    }
}

/// Per-node rewards from detached predictions. Entries outside the training
/// split are computed too but never used.
pub fn node_rewards(predictions: &Tensor, data: &TrainingData, cfg: &TrainConfig, epsilon: f64) -> Result<Vec<f64>> {
    let classes = data.classes_for(cfg.task)?;
    Ok((0..data.n())
        .map(|i| match cfg.task {
            Task::Regression => regression_reward(data.labels[i], predictions.get(i, 0), epsilon),
            Task::Classification => classification_reward(argmax(predictions.row_slice(i)) == classes[i], epsilon),
        })
        .collect())
}

/// The training objective for a fixed graph: `L_GCN + λ L_graph` where the
/// rewards come from `rewards` applied to the forward predictions and are
/// constants for differentiation.
pub fn surrogate_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    data: &TrainingData,
    edges: &[Edge],
    cfg: &TrainConfig,
    rewards: impl FnOnce(&Tensor) -> Result<Vec<f64>>,
) -> Result<(Var, LossBreakdown)> {
    let phen = tape.constant(data.phenotypes.clone());
    let weighted = match vars.attention {
        Some(av) => {
            let scores = attention_forward(tape, phen, &av)?;
            let a = aggregate_attention(tape, scores)?;
            Some(weight_phenotypes(tape, a, phen)?)
        }
        None => None,
    };
    let adjacency = normalize(edges, data.n(), cfg.propagation);
    let ax = tape.constant(adjacency.propagate(&data.features));
    let out = gcn_forward(tape, ax, &vars.gcn)?;
    let gcn_loss = match cfg.task {
        Task::Regression => {
            let pred = out;
            huber_loss(tape, pred, &data.labels, &data.train, cfg.huber_delta)?
        }
        Task::Classification => cross_entropy_loss(tape, out, data.classes_for(cfg.task)?, &data.train)?,
    };
    let rho = rewards(tape.value(out))?;
    let train_edges: Vec<Edge> = {
        let mut in_train = vec![false; data.n()];
        data.train.iter().for_each(|&i| in_train[i] = true);
        edges.iter().copied().filter(|&(s, _)| in_train[s]).collect()
    };
    let g_loss = match weighted {
        Some(f) => {
            let lp = taped_edge_log_probs(tape, f, vars.log_temperature, &train_edges, cfg.metric)?;
            let sources: Vec<usize> = train_edges.iter().map(|e| e.0).collect();
            graph_loss(tape, lp, &sources, &rho)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let train_rho: Vec<f64> = data.train.iter().map(|&i| rho[i]).collect();
    total_loss(tape, gcn_loss, g_loss, cfg.lambda, &train_rho)
}

/// Plain-value sampler shared by training, validation and inference.
struct GraphSampler<'a> {
    source: &'a GraphSource,
    k: usize,
    log_p: Option<Tensor>,
}

impl<'a> GraphSampler<'a> {
    fn new(params: &ModelParams, data: &TrainingData, source: &'a GraphSource, cfg: &TrainConfig) -> Result<Self> {
        let log_p = match params.attention_weights(&data.phenotypes, source)? {
            Some(a) => {
                let f = weight_phenotypes_plain(&a, &data.phenotypes)?;
                Some(log_prob_matrix(&f, cfg.metric, params.temperature())?)
            }
            None => None,
        };
        Ok(Self {
            source,
            k: cfg.k,
            log_p,
        })
    }

    fn sample(&self, n: usize, rng: &mut RunRng) -> Result<Vec<Edge>> {
        match (self.source, &self.log_p) {
            (GraphSource::Static(edges), _) => Ok(edges.clone()),
            (GraphSource::Random, _) => random_graph(n, self.k, rng),
            (_, Some(lp)) => Ok(gumbel_topk_sample(lp, self.k, rng)?.edge_pairs()),
            (_, None) => unreachable!("kernel sources always carry log-probabilities"),
        }
    }
}

/// Row-wise softmax of logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for i in 0..logits.rows() {
        let row = logits.row_slice(i);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&x| libm::exp(x - lse)));
    }
    Tensor::matrix(logits.rows(), c, out).expect("softmax is finite")
}

fn validation_metric(pred: &Tensor, data: &TrainingData, cfg: &TrainConfig) -> Result<f64> {
    match cfg.task {
        Task::Regression => {
            let p: Vec<f64> = (0..data.n()).map(|i| pred.get(i, 0)).collect();
            Ok(evaluate_regression(&p, &data.labels, &data.val)?.mae)
        }
        Task::Classification => {
            let classes = data.classes_for(cfg.task)?;
            let hits = data
                .val
                .iter()
                .filter(|&&i| argmax(pred.row_slice(i)) == classes[i])
                .count();
            Ok(hits as f64 / data.val.len() as f64)
        }
    }
}

fn improves(task: Task, candidate: f64, best: f64) -> bool {
    match task {
        Task::Regression => candidate < best,
        Task::Classification => candidate > best,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub gcn: f64,
    pub graph: f64,
    /// Validation MAE (regression) or accuracy (classification); `None` with
    /// an empty validation split.
    pub val_metric: Option<f64>,
    pub temperature: f64,
    pub reward_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the last ones when early stopping is
    /// off.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epsilon: f64,
}

fn diverged(err: Error, epoch: usize, last: Option<&LossBreakdown>) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            total: last.map_or(f64::NAN, |b| b.total),
            gcn: last.map_or(f64::NAN, |b| b.gcn),
            graph: last.map_or(f64::NAN, |b| b.graph),
        },
        other => other,
    }
}

pub fn init_params(data: &TrainingData, cfg: &TrainConfig) -> ModelParams {
    let mut rng = stream(cfg.seed, INIT_STREAM);
    let labels = data.train_labels();
    let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
    ModelParams::init(cfg, data.phenotypes.cols(), data.features.cols(), mean, &mut rng)
}

/// Full training run from a seeded initialization.
pub fn train(data: &TrainingData, source: &GraphSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(init_params(data, cfg), data, source, cfg)
}

pub fn train_from(
    mut params: ModelParams,
    data: &TrainingData,
    source: &GraphSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.k >= data.n() {
        return Err(Error::InvalidConfig(format!(
            "k = {} must be below N = {}",
            cfg.k,
            data.n()
        )));
    }
    if let GraphSource::FixedAttention(a) = source {
        if a.len() != data.phenotypes.cols() {
            return Err(Error::ShapeMismatch {
                op: "fixed_attention",
                left: vec![a.len()],
                right: vec![data.phenotypes.cols()],
            });
        }
    }
    data.classes_for(cfg.task)?;
    let epsilon = data.epsilon(cfg)?;
    let mut rng = stream(cfg.seed, TRAIN_STREAM);
    let mut adam = AdamState::default();
    let hyper = cfg.adam();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut last: Option<LossBreakdown> = None;

    for epoch in 1..=cfg.epochs {
        let step = (|| -> Result<(LossBreakdown, Option<f64>)> {
            let edges = GraphSampler::new(&params, data, source, cfg)?.sample(data.n(), &mut rng)?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, source);
            let (loss, breakdown) = surrogate_loss(&mut tape, &vars, data, &edges, cfg, |pred| {
                node_rewards(pred, data, cfg, epsilon)
            })?;
            if !breakdown.is_finite() {
                return Err(Error::NonFinite { op: "total_loss" });
            }
            last = Some(breakdown);
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .trainable(source)
                .into_iter()
                .map(|v| tape.grad(v).expect("trainable leaves track gradients"))
                .collect();
            adamw_step(&mut params.trainable_mut(source), &grads, &mut adam, &hyper)?;

            let val = if data.val.is_empty() {
                None
            } else {
                let edges = GraphSampler::new(&params, data, source, cfg)?.sample(data.n(), &mut rng)?;
                let pred = params
                    .gcn
                    .predict(&normalize(&edges, data.n(), cfg.propagation), &data.features)?;
                Some(validation_metric(&pred, data, cfg)?)
            };
            Ok((breakdown, val))
        })();
        let (breakdown, val) = step.map_err(|e| diverged(e, epoch, last.as_ref()))?;
        history.push(EpochRecord {
            epoch,
            total: breakdown.total,
            gcn: breakdown.gcn,
            graph: breakdown.graph,
            val_metric: val,
            temperature: params.temperature(),
            reward_mean: breakdown.reward_mean,
        });

        if cfg.patience == 0 {
            continue;
        }
        let Some(v) = val else { continue };
        match &best {
            Some((b, _, _)) if !improves(cfg.task, v, *b) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((v, epoch, params.clone()));
                since_best = 0;
            }
        }
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, history.len()),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        epsilon,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Mean prediction (regression, `N x 1`) or mean class probabilities
    /// (classification, `N x C`).
    pub mean: Tensor,
    /// The first sampled graph, for export and homophily.
    pub graph: Vec<Edge>,
}

/// Averages `n_samples` forward passes, each on a freshly sampled graph.
pub fn infer(
    params: &ModelParams,
    data: &TrainingData,
    source: &GraphSource,
    cfg: &TrainConfig,
    n_samples: usize,
    rng: &mut RunRng,
) -> Result<Inference> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let sampler = GraphSampler::new(params, data, source, cfg)?;
    let mut sum = Tensor::zeros(&[data.n(), cfg.outputs()]);
    let mut first = None;
    for _ in 0..n_samples {
        let edges = sampler.sample(data.n(), rng)?;
        let adjacency: NormalizedAdjacency = normalize(&edges, data.n(), cfg.propagation);
        let out = params.gcn.predict(&adjacency, &data.features)?;
        let out = match cfg.task {
            Task::Regression => out,
            Task::Classification => softmax_rows(&out),
        };
        sum.data_mut().iter_mut().zip(out.data()).for_each(|(s, o)| *s += o);
        first.get_or_insert(edges);
    }
    let scale = 1.0 / n_samples as f64;
    sum.data_mut().iter_mut().for_each(|x| *x *= scale);
    Ok(Inference {
        mean: sum,
        graph: first.expect("at least one sample"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub regression: Option<RegressionMetrics>,
    pub classification: Option<ClassificationMetrics>,
    /// Mean `|y_i - y_j|` over the first inference graph; `None` when it
    /// has no edges.
    pub homophily: Option<f64>,
    pub inference: Inference,
}

/// Test-split metrics with inference averaging over `cfg.inference_samples`.
pub fn evaluate(
    params: &ModelParams,
    data: &TrainingData,
    source: &GraphSource,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let mut rng = stream(cfg.seed, INFER_STREAM);
    let inference = infer(params, data, source, cfg, cfg.inference_samples, &mut rng)?;
    let (regression, classification) = match cfg.task {
        Task::Regression => {
            let p: Vec<f64> = (0..data.n()).map(|i| inference.mean.get(i, 0)).collect();
            (Some(evaluate_regression(&p, &data.labels, &data.test)?), None)
        }
        Task::Classification => (
            None,
            Some(evaluate_classification(
                &inference.mean,
                data.classes_for(cfg.task)?,
                &data.test,
            )?),
        ),
    };
    let homophily = match homophily_score(&inference.graph, &data.labels, HomophilyMode::Regression) {
        Ok(h) => Some(h),
        Err(Error::Empty(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        regression,
        classification,
        homophily,
        inference,
    })
}

/// One run's results. Timing is deliberately absent so the serialized
/// record is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub task: Task,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
    pub mae: Option<f64>,
    pub r: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub homophily: Option<f64>,
    pub attention_precision: Option<f64>,
    pub temperature: Option<f64>,
    pub epsilon: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl MetricsRecord {
    pub fn empty(method: &str, task: Task, seed: u64) -> Self {
        Self {
            method: method.into(),
            task,
            seed,
            config_hash: None,
            mae: None,
            r: None,
            accuracy: None,
            macro_auc: None,
            macro_f1: None,
            homophily: None,
            attention_precision: None,
            temperature: None,
            epsilon: None,
            best_epoch: None,
            epochs_run: None,
            history: Vec::new(),
        }
    }

    /// The headline number: test MAE (regression) or accuracy.
    pub fn primary(&self) -> Option<f64> {
        match self.task {
            Task::Regression => self.mae,
            Task::Classification => self.accuracy,
        }
    }
}

/// A trained run with everything needed for export.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub record: MetricsRecord,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
    pub attention: Option<AttentionVector>,
}

/// Train, evaluate and summarize.
pub fn run_experiment(data: &TrainingData, source: &GraphSource, cfg: &TrainConfig) -> Result<RunResult> {
    let outcome = train(data, source, cfg)?;
    let evaluation = evaluate(&outcome.params, data, source, cfg)?;
    let attention = match source {
        GraphSource::Adaptive => Some(outcome.params.attention_vector(data)?),
        _ => None,
    };
    let mut record = MetricsRecord::empty(source.name(), cfg.task, cfg.seed);
    if let Some(m) = evaluation.regression {
        record.mae = Some(m.mae);
        record.r = m.r;
    }
    if let Some(m) = &evaluation.classification {
        record.accuracy = Some(m.accuracy);
        record.macro_auc = m.macro_auc;
        record.macro_f1 = Some(m.macro_f1);
    }
    record.homophily = evaluation.homophily;
    record.attention_precision = attention.as_ref().and_then(AttentionVector::precision_at_relevant);
    record.temperature = source.samples_kernel().then(|| outcome.params.temperature());
    record.epsilon = Some(outcome.epsilon);
    record.best_epoch = Some(outcome.best_epoch);
    record.epochs_run = Some(outcome.history.len());
    record.history = outcome.history.clone();
    Ok(RunResult {
        record,
        outcome,
        evaluation,
        attention,
    })
}
