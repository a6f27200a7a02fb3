use serde::{Deserialize, Serialize};

use crate::numerics::dot;

/// Margin kept between rescaled points and the Poincaré ball boundary.
pub const BALL_MARGIN: f64 = 1e-3;

/// Distance between weighted phenotype vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    /// `1 - cos(u, v)`; defined as 1 when either operand is the zero vector.
    Cosine,
    /// Poincaré-ball distance. Operands must lie strictly inside the unit
    /// ball; [`super::pairwise_distance`] rescales rows before use.
    Hyperbolic,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Euclidean,
        DistanceMetric::Cosine,
        DistanceMetric::Hyperbolic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Hyperbolic => "hyperbolic",
        }
    }

    pub fn distance(self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => libm::sqrt(sq_euclidean(u, v)),
            DistanceMetric::Cosine => cosine_parts(u, v).0,
            DistanceMetric::Hyperbolic => libm::log1p(poincare_delta(u, v).sqrt_term()),
        }
    }

    /// Squared distance. The Euclidean case never takes a square root.
    pub fn sq_distance(self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => sq_euclidean(u, v),
            _ => {
                let d = self.distance(u, v);
                d * d
            }
        }
    }

    /// Writes the gradient of the squared distance with respect to `u` and `v`.
    pub fn sq_distance_grad(self, u: &[f64], v: &[f64], gu: &mut [f64], gv: &mut [f64]) {
        match self {
            DistanceMetric::Euclidean => {
                for j in 0..u.len() {
                    let diff = 2.0 * (u[j] - v[j]);
                    gu[j] = diff;
                    gv[j] = -diff;
                }
            }
            DistanceMetric::Cosine => {
                let (d, c, nu, nv) = cosine_parts(u, v);
                if nu == 0.0 || nv == 0.0 {
                    gu.iter_mut().for_each(|g| *g = 0.0);
                    gv.iter_mut().for_each(|g| *g = 0.0);
                    return;
                }
                // d(d^2) = -2 d dc
                for j in 0..u.len() {
                    gu[j] = -2.0 * d * (v[j] / (nu * nv) - c * u[j] / (nu * nu));
                    gv[j] = -2.0 * d * (u[j] / (nu * nv) - c * v[j] / (nv * nv));
                }
            }
            DistanceMetric::Hyperbolic => {
                let p = poincare_delta(u, v);
                let root = libm::sqrt(p.delta * (2.0 + p.delta));
                let d = libm::log1p(p.delta + root);
                // d(acosh(1 + delta)^2)/d delta, with the limit 2 at delta = 0
                let factor = if root > 0.0 { 2.0 * d / root } else { 2.0 };
                let ab = p.alpha * p.beta;
                for j in 0..u.len() {
                    let diff = u[j] - v[j];
                    let du = 4.0 * diff / ab + 4.0 * p.w * u[j] / (p.alpha * ab);
                    let dv = -4.0 * diff / ab + 4.0 * p.w * v[j] / (p.beta * ab);
                    gu[j] = factor * du;
                    gv[j] = factor * dv;
                }
            }
        }
    }
}

fn sq_euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// (distance, cosine similarity, |u|, |v|)
fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64, f64) {
    let nu = libm::sqrt(dot(u, u));
    let nv = libm::sqrt(dot(v, v));
    if nu == 0.0 || nv == 0.0 {
        return (1.0, 0.0, nu, nv);
    }
    let c = dot(u, v) / (nu * nv);
    (1.0 - c, c, nu, nv)
}

struct PoincareParts {
    /// `z - 1` where `d = acosh(z)`
    delta: f64,
    alpha: f64,
    beta: f64,
    w: f64,
}

impl PoincareParts {
    fn sqrt_term(&self) -> f64 {
        self.delta + libm::sqrt(self.delta * (2.0 + self.delta))
    }
}

fn poincare_delta(u: &[f64], v: &[f64]) -> PoincareParts {
    let alpha = 1.0 - dot(u, u);
    let beta = 1.0 - dot(v, v);
    let w = sq_euclidean(u, v);
    PoincareParts {
        delta: 2.0 * w / (alpha * beta),
        alpha,
        beta,
        w,
    }
}
