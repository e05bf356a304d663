//! Comparison strategies for classifying the unlabeled samples.
//!
//! Each embedding-based strategy extends the training embedding to new
//! points with a different out-of-sample rule; classification then happens
//! with the same nearest-neighbor margin rule the progressive interpolator
//! uses. Two strategies skip the embedding entirely: ambient
//! nearest-neighbor, and a harmonic label-propagation solve on the full
//! sample graph.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{gaussian_weights, knn_neighbors, GraphError};
use crate::sosi::classify_in_embedding;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("neighbor count must be positive")]
    ZeroK,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel scale must be positive, got {0}")]
    BadScale(f64),
    #[error("ridge penalty must be nonnegative, got {0}")]
    BadPenalty(f64),
    #[error("extension weights for query row {row} sum to zero")]
    DegenerateWeights { row: usize },
    #[error("local Gram solve failed for query row {row}")]
    GramSingular { row: usize },
    #[error("ridge system is not positive definite")]
    NotPositiveDefinite,
    #[error("harmonic system solve failed")]
    HarmonicSingular,
    #[error("every sample is labeled; nothing to propagate")]
    NothingUnlabeled,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Relative diagonal regularization for the local Gram matrices.
const GRAM_REGULARIZATION: f64 = 1e-9;
/// Diagonal jitter for the harmonic label-propagation system.
const HARMONIC_JITTER: f64 = 1e-9;

fn check_dims(train_x: &DMatrix<f64>, queries: &DMatrix<f64>) -> Result<()> {
    if train_x.ncols() != queries.ncols() {
        return Err(BaselineError::ShapeMismatch(format!(
            "training samples have {} coordinates, queries {}",
            train_x.ncols(),
            queries.ncols()
        )));
    }
    Ok(())
}

/// Indices of the `k` training rows nearest to `x`, by squared distance with
/// index tie-breaks, capped at the training count.
fn nearest_training(train_x: &DMatrix<f64>, x: &DVector<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = (0..train_x.nrows())
        .map(|j| ((train_x.row(j).transpose() - x).norm_squared(), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    order.into_iter().map(|(_, j)| j).collect()
}

/// Locally linear reconstruction weights of `x` over its `k` nearest
/// training rows: minimizes `||x - sum_i w_i z_i||^2` subject to
/// `sum_i w_i = 1`, through the regularized local Gram system.
pub fn lle_weights(
    train_x: &DMatrix<f64>,
    x: &DVector<f64>,
    k: usize,
) -> Result<(Vec<usize>, DVector<f64>)> {
    if k == 0 {
        return Err(BaselineError::ZeroK);
    }
    let neighbors = nearest_training(train_x, x, k);
    let k = neighbors.len();

    let mut gram = DMatrix::zeros(k, k);
    for a in 0..k {
        let da = train_x.row(neighbors[a]).transpose() - x;
        for b in a..k {
            let db = train_x.row(neighbors[b]).transpose() - x;
            let g = da.dot(&db);
            gram[(a, b)] = g;
            gram[(b, a)] = g;
        }
    }
    let trace = gram.trace();
    if trace == 0.0 {
        // Every neighbor coincides with the query; any convex combination
        // reconstructs it exactly.
        return Ok((neighbors, DVector::from_element(k, 1.0 / k as f64)));
    }
    for i in 0..k {
        gram[(i, i)] += GRAM_REGULARIZATION * trace;
    }

    let ones = DVector::from_element(k, 1.0);
    let w = gram
        .lu()
        .solve(&ones)
        .ok_or(BaselineError::GramSingular { row: 0 })?;
    let sum = w.sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(BaselineError::DegenerateWeights { row: 0 });
    }
    Ok((neighbors, w / sum))
}

/// Extends the training embedding by locally linear reconstruction: each
/// query's embedding is its reconstruction weights applied to the embedding
/// rows of its `k` nearest training samples.
pub fn extend_lle(
    train_x: &DMatrix<f64>,
    train_y: &DMatrix<f64>,
    queries: &DMatrix<f64>,
    k: usize,
) -> Result<DMatrix<f64>> {
    check_dims(train_x, queries)?;
    let mut out = DMatrix::zeros(queries.nrows(), train_y.ncols());
    for i in 0..queries.nrows() {
        let x = queries.row(i).transpose();
        let (neighbors, w) = lle_weights(train_x, &x, k).map_err(|e| match e {
            BaselineError::GramSingular { .. } => BaselineError::GramSingular { row: i },
            BaselineError::DegenerateWeights { .. } => BaselineError::DegenerateWeights { row: i },
            other => other,
        })?;
        let mut row = DVector::zeros(train_y.ncols());
        for (c, &j) in neighbors.iter().enumerate() {
            row += w[c] * train_y.row(j).transpose();
        }
        out.set_row(i, &row.transpose());
    }
    Ok(out)
}

/// Extends the training embedding by normalized Gaussian weighting: each
/// query's embedding is the kernel-weighted average of all training
/// embedding rows, with the weights renormalized to sum to one.
pub fn extend_nystrom(
    train_x: &DMatrix<f64>,
    train_y: &DMatrix<f64>,
    queries: &DMatrix<f64>,
    sigma: f64,
) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) {
        return Err(BaselineError::BadScale(sigma));
    }
    check_dims(train_x, queries)?;
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut out = DMatrix::zeros(queries.nrows(), train_y.ncols());
    for i in 0..queries.nrows() {
        let x = queries.row(i).transpose();
        let mut row = DVector::zeros(train_y.ncols());
        let mut total = 0.0;
        for j in 0..train_x.nrows() {
            let d2 = (train_x.row(j).transpose() - &x).norm_squared();
            let w = (-d2 * inv_s2).exp();
            total += w;
            row += w * train_y.row(j).transpose();
        }
        if total == 0.0 {
            return Err(BaselineError::DegenerateWeights { row: i });
        }
        out.set_row(i, &(row / total).transpose());
    }
    Ok(out)
}

/// Gaussian kernel ridge regression, one shared scale across output
/// dimensions.
///
/// With zero penalty this reproduces exact kernel interpolation through an
/// independent code path (Cholesky factorization instead of pivoted LU), so
/// the two implementations can cross-check each other.
#[derive(Debug, Clone)]
pub struct KernelRidge {
    centers: DMatrix<f64>,
    sigma: f64,
    coeffs: DMatrix<f64>,
}

impl KernelRidge {
    pub fn fit(
        centers: DMatrix<f64>,
        targets: &DMatrix<f64>,
        sigma: f64,
        penalty: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(BaselineError::BadScale(sigma));
        }
        if !(penalty >= 0.0) {
            return Err(BaselineError::BadPenalty(penalty));
        }
        if targets.nrows() != centers.nrows() {
            return Err(BaselineError::ShapeMismatch(format!(
                "{} targets for {} centers",
                targets.nrows(),
                centers.nrows()
            )));
        }
        let mut k = ridge_kernel(&centers, &centers, sigma);
        for i in 0..k.nrows() {
            k[(i, i)] += penalty;
        }
        let coeffs = k
            .cholesky()
            .ok_or(BaselineError::NotPositiveDefinite)?
            .solve(targets);
        Ok(Self {
            centers,
            sigma,
            coeffs,
        })
    }

    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        let row = DMatrix::from_rows(&[x.transpose()]);
        let k = ridge_kernel(&row, &self.centers, self.sigma);
        (k * &self.coeffs).row(0).transpose()
    }

    pub fn predict_rows(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        ridge_kernel(xs, &self.centers, self.sigma) * &self.coeffs
    }
}

fn ridge_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let d2 = (a.row(i) - b.row(j)).norm_squared();
        (-d2 / (sigma * sigma)).exp()
    })
}

/// Nearest-neighbor classification in the ambient space, with the same
/// distance-ratio confidence as the embedding-space rule.
pub fn classify_nn_ambient(
    train_x: &DMatrix<f64>,
    train_labels: &[usize],
    queries: &DMatrix<f64>,
) -> Vec<(usize, f64)> {
    (0..queries.nrows())
        .map(|i| classify_in_embedding(train_x, train_labels, &queries.row(i).transpose()))
        .collect()
}

/// Harmonic label propagation on the full sample graph.
///
/// Rows `0..train_labels.len()` of `x` are the labeled samples. The graph is
/// the union K-NN graph over all rows with Gaussian weights and no label
/// routing. Each class's indicator is propagated by solving
/// `(D_uu - W_uu + jitter I) f_u = W_ul y_l`; every unlabeled row takes the
/// class with the largest propagated value, ties to the lower class.
pub fn ssl_gaussian_fields(
    x: &DMatrix<f64>,
    train_labels: &[usize],
    knn: usize,
    sigma: f64,
) -> Result<Vec<usize>> {
    let f = harmonic_scores(x, train_labels, knn, sigma)?;
    let mut labels = Vec::with_capacity(f.nrows());
    for i in 0..f.nrows() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..f.ncols() {
            if f[(i, c)] > best.0 {
                best = (f[(i, c)], c + 1);
            }
        }
        labels.push(best.1);
    }
    Ok(labels)
}

/// The propagated per-class values behind [`ssl_gaussian_fields`], one row
/// per unlabeled sample and one column per class.
pub fn harmonic_scores(
    x: &DMatrix<f64>,
    train_labels: &[usize],
    knn: usize,
    sigma: f64,
) -> Result<DMatrix<f64>> {
    let q = x.nrows();
    let n = train_labels.len();
    if n >= q {
        return Err(BaselineError::NothingUnlabeled);
    }
    let class_count = train_labels.iter().copied().max().unwrap_or(0);

    let nbrs = knn_neighbors(x, knn)?;
    let w = gaussian_weights(x, &nbrs, sigma)?;
    let u = q - n;

    let mut system = DMatrix::zeros(u, u);
    for i in 0..u {
        let degree = w.row(n + i).sum();
        for j in 0..u {
            system[(i, j)] = -w[(n + i, n + j)];
        }
        system[(i, i)] += degree + HARMONIC_JITTER;
    }

    let mut rhs = DMatrix::zeros(u, class_count);
    for i in 0..u {
        for j in 0..n {
            rhs[(i, train_labels[j] - 1)] += w[(n + i, j)];
        }
    }

    system
        .lu()
        .solve(&rhs)
        .ok_or(BaselineError::HarmonicSingular)
}
