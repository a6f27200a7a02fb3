use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Edge;
use crate::numerics::Tensor;

/// How `A + I` is normalized before propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// `D^-1/2 (A + I) D^-1/2`.
    #[default]
    Symmetric,
    /// `D^-1 (A + I)`: every row is the mean over the node and its neighbours.
    Mean,
}

/// A normalized `A + I` stored as sorted per-row neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

/// Symmetric GCN propagation matrix for an edge set: union of the edges and
/// their reverses, plus self-loops, normalized by the degrees of `A + I`.
/// Self-edges in the input are ignored.
pub fn symmetrize(edges: &[Edge], n: usize) -> NormalizedAdjacency {
    normalize(edges, n, Propagation::Symmetric)
}

/// Same neighbourhoods as [`symmetrize`], with the chosen normalization.
pub fn normalize(edges: &[Edge], n: usize, propagation: Propagation) -> NormalizedAdjacency {
    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(i, j) in edges {
        if i != j {
            neighbours[i].insert(j);
            neighbours[j].insert(i);
        }
    }
    for (i, set) in neighbours.iter_mut().enumerate() {
        set.insert(i);
    }
    let inv_sqrt_deg: Vec<f64> = neighbours.iter().map(|s| 1.0 / libm::sqrt(s.len() as f64)).collect();
    let rows = neighbours
        .iter()
        .enumerate()
        .map(|(i, set)| {
            set.iter()
                .map(|&j| {
                    let w = match propagation {
                        Propagation::Symmetric => inv_sqrt_deg[i] * inv_sqrt_deg[j],
                        Propagation::Mean => 1.0 / set.len() as f64,
                    };
                    (j, w)
                })
                .collect()
        })
        .collect();
    NormalizedAdjacency { n, rows }
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = vec![0.0; self.n * self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[i * self.n + j] = w;
            }
        }
        Tensor::from_parts(vec![self.n, self.n], out)
    }

    /// `Â X` for an `N x M` matrix.
    pub fn propagate(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.n, "propagate: row count must equal node count");
        let m = x.cols();
        let mut out = vec![0.0; self.n * m];
        for (i, row) in self.rows.iter().enumerate() {
            let dst = &mut out[i * m..(i + 1) * m];
            for &(j, w) in row {
                for (o, &v) in dst.iter_mut().zip(x.row_slice(j)) {
                    *o += w * v;
                }
            }
        }
        Tensor::from_parts(vec![self.n, m], out)
    }
}
