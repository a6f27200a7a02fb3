//! Graph construction: distance kernel, Gumbel-Top-k edge sampling, static
//! kNN and random baselines, GCN normalization and homophily.

mod adjacency;
mod metric;

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

pub use adjacency::{normalize, symmetrize, NormalizedAdjacency, Propagation};
pub use metric::{DistanceMetric, BALL_MARGIN};

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Directed edge `(source, target)`.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SampledEdge {
    pub src: usize,
    pub dst: usize,
    /// `log p_ij = -t d(f_i, f_j)^2` at sampling time.
    pub log_p: f64,
}

/// A k-out-degree graph drawn by Gumbel-Top-k, with the noise that produced
/// it so the draw can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph {
    pub n: usize,
    pub k: usize,
    pub edges: Vec<SampledEdge>,
    pub noise: Tensor,
}

impl SampledGraph {
    pub fn edge_pairs(&self) -> Vec<Edge> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    pub fn adjacency(&self) -> NormalizedAdjacency {
        symmetrize(&self.edge_pairs(), self.n)
    }
}

/// Scales every row by `(1 - BALL_MARGIN) / max row norm`.
pub fn rescale_to_ball(features: &Tensor) -> Tensor {
    let max_norm = (0..features.rows())
        .map(|i| libm::sqrt(crate::numerics::dot(features.row_slice(i), features.row_slice(i))))
        .fold(0.0, f64::max);
    let mut out = features.clone();
    if max_norm > 0.0 {
        let s = (1.0 - BALL_MARGIN) / max_norm;
        out.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    out
}

/// All pairwise distances between rows. Hyperbolic inputs are rescaled into
/// the ball first.
pub fn pairwise_distance(features: &Tensor, metric: DistanceMetric) -> Result<Tensor> {
    pairwise(features, metric, DistanceMetric::distance)
}

/// Squared pairwise distances, without a square-root round trip for the
/// Euclidean metric.
pub fn pairwise_sq_distance(features: &Tensor, metric: DistanceMetric) -> Result<Tensor> {
    pairwise(features, metric, DistanceMetric::sq_distance)
}

fn pairwise(
    features: &Tensor,
    metric: DistanceMetric,
    dist: fn(DistanceMetric, &[f64], &[f64]) -> f64,
) -> Result<Tensor> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::Degenerate("pairwise distance needs at least 2 rows".into()));
    }
    let scaled;
    let f = if metric == DistanceMetric::Hyperbolic {
        scaled = rescale_to_ball(features);
        if !scaled.all_finite() {
            return Err(Error::NonFinite { op: "rescale_to_ball" });
        }
        &scaled
    } else {
        features
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist(metric, f.row_slice(i), f.row_slice(j));
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Tensor::matrix(n, n, out).map_err(|_| Error::NonFinite {
        op: "pairwise_distance",
    })
}

/// `log p_ij = -t * D_ij^2`, computed without going through `exp`.
pub fn edge_probabilities(distances: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let data = distances.data().iter().map(|d| -temperature * d * d).collect();
    Tensor::new(distances.shape().to_vec(), data)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(alloc::format!(
            "k must satisfy 1 <= k < N (k = {k}, N = {n})"
        )));
    }
    Ok(())
}

/// Draws `k` distinct targets per node by perturbing `log_p` with i.i.d.
/// Gumbel(0, 1) noise and keeping the top `k`. The diagonal is excluded.
pub fn gumbel_topk_sample<R: Rng + ?Sized>(log_p: &Tensor, k: usize, rng: &mut R) -> Result<SampledGraph> {
    let n = log_p.rows();
    check_k(k, n)?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale is valid");
    let noise: Vec<f64> = (0..n * n).map(|_| gumbel.sample(rng)).collect();
    gumbel_topk_with_noise(log_p, k, &Tensor::matrix(n, n, noise)?)
}

/// Deterministic Gumbel-Top-k given frozen noise. Ties in the perturbed
/// score go to the lower index.
pub fn gumbel_topk_with_noise(log_p: &Tensor, k: usize, noise: &Tensor) -> Result<SampledGraph> {
    let n = log_p.rows();
    if log_p.shape() != [n, n] || noise.shape() != log_p.shape() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_topk",
            left: log_p.shape().to_vec(),
            right: noise.shape().to_vec(),
        });
    }
    check_k(k, n)?;
    let mut edges = Vec::with_capacity(n * k);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scored.clear();
        let lp = log_p.row_slice(i);
        let g = noise.row_slice(i);
        scored.extend((0..n).filter(|&j| j != i).map(|j| (lp[j] + g[j], j)));
        let by_score =
            |a: &(f64, usize), b: &(f64, usize)| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_score);
            scored.truncate(k);
        }
        scored.sort_by(by_score);
        edges.extend(scored.iter().map(|&(_, j)| SampledEdge {
            src: i,
            dst: j,
            log_p: lp[j],
        }));
    }
    Ok(SampledGraph {
        n,
        k,
        edges,
        noise: noise.clone(),
    })
}

/// The `k` nearest neighbours of every row, ascending distance with index
/// tie-break. No self-edges.
pub fn knn_static_graph(features: &Tensor, k: usize, metric: DistanceMetric) -> Result<Vec<Edge>> {
    let n = features.rows();
    check_k(k, n)?;
    let d = pairwise_distance(features, metric)?;
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (d.get(i, j), j)));
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        edges.extend(cand.iter().take(k).map(|&(_, j)| (i, j)));
    }
    Ok(edges)
}

/// `k` distinct uniformly random targets per node, excluding the node itself.
pub fn random_graph<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Edge>> {
    check_k(k, n)?;
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let picks = index::sample(rng, n - 1, k);
        let mut targets: Vec<usize> = picks.into_iter().map(|j| if j >= i { j + 1 } else { j }).collect();
        targets.sort_unstable();
        edges.extend(targets.into_iter().map(|j| (i, j)));
    }
    Ok(edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomophilyMode {
    /// Mean `|y_i - y_j|` over undirected edges; lower is more homophilous.
    Regression,
    /// Fraction of undirected edges joining equal labels; higher is more
    /// homophilous.
    Classification,
}

pub fn homophily_score(edges: &[Edge], labels: &[f64], mode: HomophilyMode) -> Result<f64> {
    let unique: BTreeSet<Edge> = edges
        .iter()
        .filter(|(i, j)| i != j)
        .map(|&(i, j)| if i < j { (i, j) } else { (j, i) })
        .collect();
    if unique.is_empty() {
        return Err(Error::Empty("edge set"));
    }
    if let Some(&(_, j)) = unique.iter().find(|&&(_, j)| j >= labels.len()) {
        return Err(Error::ShapeMismatch {
            op: "homophily_score",
            left: vec![labels.len()],
            right: vec![j],
        });
    }
    let total: f64 = unique
        .iter()
        .map(|&(i, j)| match mode {
            HomophilyMode::Regression => (labels[i] - labels[j]).abs(),
            HomophilyMode::Classification => f64::from(u8::from(labels[i] == labels[j])),
        })
        .sum();
    Ok(total / unique.len() as f64)
}

/// `-exp(log_temp) * d(f_src, f_dst)^2` for each listed edge, on the tape,
/// as an `E x 1` column. Hyperbolic features are rescaled into the ball on
/// the tape so the rescaling is differentiated too.
pub fn taped_edge_log_probs(
    tape: &mut Tape,
    features: Var,
    log_temp: Var,
    edges: &[Edge],
    metric: DistanceMetric,
) -> Result<Var> {
    let mut f = features;
    if metric == DistanceMetric::Hyperbolic {
        let sq = tape.square(features)?;
        let norms2 = tape.sum_cols(sq)?;
        let max2 = tape.max(norms2)?;
        if tape.value(max2).item().unwrap_or(0.0) > 0.0 {
            let max_norm = tape.sqrt(max2)?;
            let margin = tape.constant(Tensor::scalar(1.0 - BALL_MARGIN));
            let s = tape.div(margin, max_norm)?;
            f = tape.mul(features, s)?;
        }
    }
    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let fs = tape.gather_rows(f, &src)?;
    let fd = tape.gather_rows(f, &dst)?;
    let d2 = tape.pair_dist_sq(fs, fd, metric)?;
    let t = tape.exp(log_temp)?;
    let scaled = tape.mul(d2, t)?;
    tape.neg(scaled)
}

/// Full `N x N` log-probability matrix for sampling (no tape).
pub fn log_prob_matrix(features: &Tensor, metric: DistanceMetric, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let mut d2 = pairwise_sq_distance(features, metric)?;
    d2.data_mut().iter_mut().for_each(|x| *x *= -temperature);
    Ok(d2)
}
