//! Low-dimensional class-aware embeddings of the labeled samples.
//!
//! Both embeddings solve generalized symmetric eigenproblems built from the
//! within- and between-class graph Laplacians:
//!
//! * supervised Laplacian: `(L_w - mu L_b) z = lambda D_w z`, smallest
//!   eigenvalues, keeping non-constant eigenvectors;
//! * Fisher-style: `L_b z = lambda (L_w + eps I) z`, largest eigenvalues.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ClassGraphs;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("embedding dimension {dim} too large for {points} points")]
    DimTooLarge { dim: usize, points: usize },
    #[error("eigensolve failed: {0}")]
    EigensolveFailed(String),
    #[error("only {found} admissible eigenvectors for requested dimension {needed}")]
    TooFewAdmissible { needed: usize, found: usize },
    #[error("between-class graph is empty: no separating directions")]
    NoSeparatingDirections,
    #[error("{0} labels for {1} embedded points")]
    LabelCountMismatch(usize, usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sidecar error on {path}: {source}")]
    Sidecar {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// Cosine-with-ones threshold above which an eigenvector counts as constant.
const CONSTANT_COSINE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbeddingMethod {
    SupervisedLaplacian { mu: f64 },
    FisherNonlinear,
}

impl EmbeddingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingMethod::SupervisedLaplacian { .. } => "sup-laplacian",
            EmbeddingMethod::FisherNonlinear => "fisher",
        }
    }
}

/// Embedded coordinates of the labeled samples, one row per sample.
#[derive(Debug, Clone)]
pub struct Embedding {
    coords: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    method: EmbeddingMethod,
}

impl Embedding {
    pub fn from_coords(coords: DMatrix<f64>, eigenvalues: Vec<f64>, method: EmbeddingMethod) -> Self {
        Self {
            coords,
            eigenvalues,
            method,
        }
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn method(&self) -> EmbeddingMethod {
        self.method
    }

    /// Writes coordinates as bare CSV plus a JSON sidecar holding the
    /// method, its parameter, and the eigenvalues.
    pub fn save(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.coords.nrows() {
            let row: Vec<String> = (0..self.coords.ncols())
                .map(|j| format!("{}", self.coords[(i, j)]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(csv_path, out).map_err(|e| EmbeddingError::Io {
            path: csv_path.to_path_buf(),
            source: e,
        })?;

        let sidecar = Sidecar {
            method: self.method.name().to_string(),
            mu: match self.method {
                EmbeddingMethod::SupervisedLaplacian { mu } => Some(mu),
                EmbeddingMethod::FisherNonlinear => None,
            },
            dim: self.dim(),
            eigenvalues: self.eigenvalues.clone(),
        };
        let file = std::fs::File::create(sidecar_path).map_err(|e| EmbeddingError::Io {
            path: sidecar_path.to_path_buf(),
            source: e,
        })?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, &sidecar).map_err(|e| EmbeddingError::Sidecar {
            path: sidecar_path.to_path_buf(),
            source: e,
        })?;
        writer.write_all(b"\n").map_err(|e| EmbeddingError::Io {
            path: sidecar_path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub method: String,
    pub mu: Option<f64>,
    pub dim: usize,
    pub eigenvalues: Vec<f64>,
}

/// Supervised Laplacian embedding: minimizes within-class spread while
/// repelling between-class neighbors with strength `mu`.
///
/// Solves `(L_w - mu L_b) z = lambda D_w z`, returns the `dim` eigenvectors
/// of smallest eigenvalue after discarding near-constant ones, each scaled
/// so that `z^T D_w z = 1`.
pub fn supervised_laplacian(graphs: &ClassGraphs, mu: f64, dim: usize) -> Result<Embedding> {
    let n = graphs.len();
    check_dim(dim, n)?;

    let degrees = positive_degrees(&graphs.deg_within);
    let a = &graphs.lap_within - mu * &graphs.lap_between;

    let inv_sqrt = degrees.map(|d| 1.0 / d.sqrt());
    let mut s = a.clone();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let s = symmetrize(s);
    let eig = SymmetricEigen::new(s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));

    let mut coords = DMatrix::zeros(n, dim);
    let mut eigenvalues = Vec::with_capacity(dim);
    let mut found = 0;
    for &idx in &order {
        let u = eig.eigenvectors.column(idx);
        let mut z = DVector::from_iterator(n, (0..n).map(|i| u[i] * inv_sqrt[i]));
        if cosine_with_ones(&z) > CONSTANT_COSINE {
            continue;
        }
        let d_norm = (0..n).map(|i| degrees[i] * z[i] * z[i]).sum::<f64>().sqrt();
        if !(d_norm > 0.0) {
            continue;
        }
        z /= d_norm;
        coords.set_column(found, &z);
        eigenvalues.push(eig.eigenvalues[idx]);
        found += 1;
        if found == dim {
            break;
        }
    }
    if found < dim {
        return Err(EmbeddingError::TooFewAdmissible {
            needed: dim,
            found,
        });
    }
    Ok(Embedding {
        coords,
        eigenvalues,
        method: EmbeddingMethod::SupervisedLaplacian { mu },
    })
}

/// Fisher-style nonlinear embedding: maximizes between-class spread against
/// within-class spread.
///
/// Solves `L_b z = lambda (L_w + eps I) z` with
/// `eps = 1e-8 trace(L_w) / N`, returning the `dim` eigenvectors of largest
/// eigenvalue, unit-normalized, eigenvalues in non-increasing order.
pub fn fisher_nonlinear(graphs: &ClassGraphs, dim: usize) -> Result<Embedding> {
    let n = graphs.len();
    check_dim(dim, n)?;
    if graphs.w_between.amax() == 0.0 {
        return Err(EmbeddingError::NoSeparatingDirections);
    }

    let trace: f64 = graphs.lap_within.diagonal().sum();
    let eps = if trace > 0.0 { 1e-8 * trace / n as f64 } else { 1e-8 };
    let mut b = graphs.lap_within.clone();
    for i in 0..n {
        b[(i, i)] += eps;
    }

    let chol = b
        .cholesky()
        .ok_or_else(|| EmbeddingError::EigensolveFailed("within-class matrix not positive definite".into()))?;
    let l = chol.l();
    let a1 = l
        .solve_lower_triangular(&graphs.lap_between)
        .ok_or_else(|| EmbeddingError::EigensolveFailed("triangular solve failed".into()))?;
    let m = l
        .solve_lower_triangular(&a1.transpose())
        .ok_or_else(|| EmbeddingError::EigensolveFailed("triangular solve failed".into()))?
        .transpose();
    let eig = SymmetricEigen::new(symmetrize(m));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));

    let top = eig.eigenvalues[order[0]];
    if !(top > 1e-10) {
        return Err(EmbeddingError::NoSeparatingDirections);
    }

    let lt = l.transpose();
    let mut coords = DMatrix::zeros(n, dim);
    let mut eigenvalues = Vec::with_capacity(dim);
    for (col, &idx) in order.iter().take(dim).enumerate() {
        let u = eig.eigenvectors.column(idx).into_owned();
        let mut z = lt
            .solve_upper_triangular(&u)
            .ok_or_else(|| EmbeddingError::EigensolveFailed("triangular solve failed".into()))?;
        let norm = z.norm();
        if !(norm > 0.0) {
            return Err(EmbeddingError::EigensolveFailed("zero eigenvector".into()));
        }
        z /= norm;
        coords.set_column(col, &z);
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(Embedding {
        coords,
        eigenvalues,
        method: EmbeddingMethod::FisherNonlinear,
    })
}

fn check_dim(dim: usize, points: usize) -> Result<()> {
    if dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    if dim > points {
        return Err(EmbeddingError::DimTooLarge { dim, points });
    }
    Ok(())
}

fn positive_degrees(deg: &DVector<f64>) -> DVector<f64> {
    let positive_mean = {
        let (sum, count) = deg
            .iter()
            .filter(|&&d| d > 0.0)
            .fold((0.0, 0usize), |(s, c), &d| (s + d, c + 1));
        if count > 0 {
            sum / count as f64
        } else {
            1.0
        }
    };
    let floor = 1e-8 * positive_mean;
    deg.map(|d| if d > 0.0 { d } else { floor })
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

fn cosine_with_ones(z: &DVector<f64>) -> f64 {
    let norm = z.norm();
    if norm == 0.0 {
        return 1.0;
    }
    let n = z.len() as f64;
    (z.sum().abs() / (norm * n.sqrt())).min(1.0)
}

/// For each embedding dimension, the unordered class pairs whose coordinate
/// ranges are strictly disjoint along that dimension.
#[derive(Debug, Clone)]
pub struct SeparablePairs {
    per_dim: Vec<Vec<(usize, usize)>>,
}

impl SeparablePairs {
    pub fn pairs(&self, dim: usize) -> &[(usize, usize)] {
        &self.per_dim[dim]
    }

    pub fn dims(&self) -> usize {
        self.per_dim.len()
    }
}

/// Computes the separable class pairs of an embedding. Pairs are stored with
/// the lower class id first; a shared boundary value does not separate.
pub fn separable_pairs(emb: &Embedding, labels: &[usize]) -> Result<SeparablePairs> {
    if labels.len() != emb.len() {
        return Err(EmbeddingError::LabelCountMismatch(labels.len(), emb.len()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0);
    let mut per_dim = Vec::with_capacity(emb.dim());
    for k in 0..emb.dim() {
        let mut lo = vec![f64::INFINITY; classes + 1];
        let mut hi = vec![f64::NEG_INFINITY; classes + 1];
        for (i, &c) in labels.iter().enumerate() {
            let v = emb.coords[(i, k)];
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
        let mut pairs = Vec::new();
        for m in 1..=classes {
            if lo[m].is_infinite() {
                continue;
            }
            for p in (m + 1)..=classes {
                if lo[p].is_infinite() {
                    continue;
                }
                if hi[m] < lo[p] || hi[p] < lo[m] {
                    pairs.push((m, p));
                }
            }
        }
        per_dim.push(pairs);
    }
    Ok(SeparablePairs { per_dim })
}
