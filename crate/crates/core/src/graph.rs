//! K-nearest-neighbor tables and class-aware weighted graphs.
//!
//! Within-class and between-class affinities are kept separate so the
//! embedding stage can pull same-class samples together while pushing
//! different-class samples apart.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("need at least {0} rows for K = {1} neighbors")]
    TooFewRows(usize, usize),
    #[error("K must be positive")]
    ZeroK,
    #[error("{0} labels for {1} rows")]
    LabelCountMismatch(usize, usize),
    #[error("kernel scale must be positive, got {0}")]
    BadScale(f64),
    #[error("weight matrix is not symmetric at ({0}, {1}): difference {2:e}")]
    Asymmetric(usize, usize, f64),
    #[error("weight matrix must be square, got {0} x {1}")]
    NotSquare(usize, usize),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Exact K-nearest-neighbor lists under Euclidean distance.
///
/// Lists are sorted by ascending distance with ties broken by lower index,
/// and never contain the query point itself.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    neighbors: Vec<Vec<usize>>,
    distances: Vec<Vec<f64>>,
    k: usize,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i]
    }

    /// Neighbors of `i` whose label equals `class`, in distance order.
    pub fn class_neighbors(&self, i: usize, labels: &[usize], class: usize) -> Vec<usize> {
        self.neighbors[i]
            .iter()
            .copied()
            .filter(|&j| labels[j] == class)
            .collect()
    }

    /// Median over all stored neighbor distances; the default graph kernel
    /// scale.
    pub fn median_distance(&self) -> f64 {
        let mut all: Vec<f64> = self.distances.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        if all.is_empty() {
            return 0.0;
        }
        let mid = all.len() / 2;
        if all.len() % 2 == 1 {
            all[mid]
        } else {
            0.5 * (all[mid - 1] + all[mid])
        }
    }
}

/// Builds the exact K-NN table for the rows of `x`.
pub fn knn_neighbors(x: &DMatrix<f64>, k: usize) -> Result<NeighborTable> {
    let q = x.nrows();
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    if k >= q {
        return Err(GraphError::TooFewRows(k + 1, k));
    }

    let mut neighbors = Vec::with_capacity(q);
    let mut distances = Vec::with_capacity(q);
    for i in 0..q {
        let mut order: Vec<(f64, usize)> = (0..q)
            .filter(|&j| j != i)
            .map(|j| (squared_distance(x, i, j), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.truncate(k);
        neighbors.push(order.iter().map(|&(_, j)| j).collect());
        distances.push(order.iter().map(|&(d2, _)| d2.sqrt()).collect());
    }
    Ok(NeighborTable {
        neighbors,
        distances,
        k,
    })
}

fn squared_distance(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..x.ncols() {
        let d = x[(i, c)] - x[(j, c)];
        acc += d * d;
    }
    acc
}

/// Largest pairwise Euclidean distance among the rows of `x`.
pub fn max_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..x.nrows() {
        for j in (i + 1)..x.nrows() {
            best = best.max(squared_distance(x, i, j));
        }
    }
    best.sqrt()
}

/// Within- and between-class graph matrices for a labeled sample set.
#[derive(Debug, Clone)]
pub struct ClassGraphs {
    pub w_within: DMatrix<f64>,
    pub w_between: DMatrix<f64>,
    pub lap_within: DMatrix<f64>,
    pub lap_between: DMatrix<f64>,
    /// Diagonal of the within-class degree matrix.
    pub deg_within: DVector<f64>,
}

impl ClassGraphs {
    pub fn build(
        x: &DMatrix<f64>,
        labels: &[usize],
        nbrs: &NeighborTable,
        kernel_scale: f64,
    ) -> Result<Self> {
        let (w_within, w_between) = class_weights(x, labels, nbrs, kernel_scale)?;
        let (lap_within, deg_within) = laplacian(&w_within)?;
        let (lap_between, _) = laplacian(&w_between)?;
        Ok(Self {
            w_within,
            w_between,
            lap_within,
            lap_between,
            deg_within,
        })
    }

    pub fn len(&self) -> usize {
        self.w_within.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.w_within.nrows() == 0
    }
}

/// Gaussian edge weights split by label agreement.
///
/// An edge joins `i` and `j` when either appears in the other's neighbor
/// list; its weight is `exp(-||x_i - x_j||^2 / kernel_scale^2)` and lands in
/// the within-class matrix when labels match, otherwise in the between-class
/// matrix. Both outputs are symmetric with zero diagonals and disjoint
/// supports.
pub fn class_weights(
    x: &DMatrix<f64>,
    labels: &[usize],
    nbrs: &NeighborTable,
    kernel_scale: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = x.nrows();
    if labels.len() != q {
        return Err(GraphError::LabelCountMismatch(labels.len(), q));
    }
    if !(kernel_scale > 0.0) {
        return Err(GraphError::BadScale(kernel_scale));
    }

    let mut w_within = DMatrix::zeros(q, q);
    let mut w_between = DMatrix::zeros(q, q);
    for i in 0..q {
        for &j in nbrs.neighbors(i) {
            let w = (-squared_distance(x, i, j) / (kernel_scale * kernel_scale)).exp();
            let target = if labels[i] == labels[j] {
                &mut w_within
            } else {
                &mut w_between
            };
            // The same value lands on both triangles, so the max-symmetrized
            // union of directed K-NN edges is just "set both entries".
            target[(i, j)] = w;
            target[(j, i)] = w;
        }
    }
    Ok((w_within, w_between))
}

/// Gaussian edge weights over the union K-NN graph with labels ignored.
pub fn gaussian_weights(
    x: &DMatrix<f64>,
    nbrs: &NeighborTable,
    kernel_scale: f64,
) -> Result<DMatrix<f64>> {
    let uniform = vec![0usize; x.nrows()];
    let (w, _) = class_weights(x, &uniform, nbrs, kernel_scale)?;
    Ok(w)
}

/// Unnormalized graph Laplacian `L = D - W` with the degree diagonal.
pub fn laplacian(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let q = w.nrows();
    if w.ncols() != q {
        return Err(GraphError::NotSquare(w.nrows(), w.ncols()));
    }
    for i in 0..q {
        for j in (i + 1)..q {
            let delta = (w[(i, j)] - w[(j, i)]).abs();
            if delta > 1e-10 {
                return Err(GraphError::Asymmetric(i, j, delta));
            }
        }
    }
    let degrees = DVector::from_iterator(q, (0..q).map(|i| w.row(i).sum()));
    let mut lap = -w.clone();
    for i in 0..q {
        lap[(i, i)] = degrees[i] - w[(i, i)];
    }
    Ok((lap, degrees))
}
