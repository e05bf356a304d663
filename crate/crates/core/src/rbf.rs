//! Gaussian RBF interpolation with direction-aware scale selection.
//!
//! Each embedding dimension k gets its own kernel scale `sigma_k` and
//! coefficient vector `c_k`; the interpolant is
//! `f_k(x) = sum_l c_lk exp(-||x - a_l||^2 / sigma_k^2)`.
//!
//! Scales are chosen on a grid by balancing two empirical terms measured at
//! the training points: a gradient-irregularity term (how much gradient
//! magnitude exceeds what the neighbor directions explain) and a class
//! separation term (how strongly gradients point at separable classes).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::embedding::SeparablePairs;
use crate::graph::NeighborTable;

#[derive(Debug, Error)]
pub enum RbfError {
    #[error("kernel scale must be positive, got {0}")]
    BadScale(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel matrix singular even after jitter (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("fit residual {residual:e} exceeds bound {bound:e}")]
    ResidualTooLarge { residual: f64, bound: f64 },
    #[error("regularizer degenerate in dimension {dim}: every training point was skipped")]
    DegenerateRegularizer { dim: usize },
    #[error("no admissible kernel scale in the grid for dimension {dim}")]
    NoAdmissibleScale { dim: usize },
    #[error("scale grid is empty or nonpositive")]
    EmptyGrid,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad interpolator file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, RbfError>;

/// Condition-estimate threshold beyond which the fit retries with jitter.
const CONDITION_LIMIT: f64 = 1e12;
/// Relative diagonal jitter used on the retry: `1e-10 trace(Phi) / L`.
const JITTER_FACTOR: f64 = 1e-10;
/// Residual bound factor: fits must reproduce targets within
/// `1e-8 (1 + max |Y|)`.
const RESIDUAL_FACTOR: f64 = 1e-8;
/// Most correction sweeps applied when the first solve misses the residual
/// bound; each sweep reuses the existing factorization.
const REFINEMENT_SWEEP_LIMIT: usize = 8;
/// Directional-derivative denominators below this are treated as degenerate.
const DENOMINATOR_FLOOR: f64 = 1e-12;

const MAGIC: &[u8; 8] = b"RBFINT01";

/// Kernel matrix between evaluation points (rows) and centers (columns):
/// entry `(i, l)` is `exp(-||x_i - a_l||^2 / sigma^2)`.
pub fn build_kernel_matrix(
    eval: &DMatrix<f64>,
    centers: &DMatrix<f64>,
    sigma: f64,
) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) {
        return Err(RbfError::BadScale(sigma));
    }
    if eval.ncols() != centers.ncols() {
        return Err(RbfError::ShapeMismatch(format!(
            "evaluation points have {} coordinates, centers {}",
            eval.ncols(),
            centers.ncols()
        )));
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut phi = DMatrix::zeros(eval.nrows(), centers.nrows());
    for i in 0..eval.nrows() {
        for l in 0..centers.nrows() {
            let mut d2 = 0.0;
            for c in 0..eval.ncols() {
                let d = eval[(i, c)] - centers[(l, c)];
                d2 += d * d;
            }
            phi[(i, l)] = (-d2 * inv_s2).exp();
        }
    }
    Ok(phi)
}

/// What the linear solve had to do to produce coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics {
    /// One-norm condition estimate of the unjittered kernel matrix.
    pub condition_estimate: f64,
    /// Diagonal jitter added on retry, if any.
    pub jitter: Option<f64>,
    /// Correction sweeps needed to bring the residual under its bound.
    pub refinement_sweeps: usize,
}

/// Solves `Phi C = Y` by pivoted LU.
///
/// If the one-norm condition estimate exceeds 1e12 the solve retries once
/// with diagonal jitter `1e-10 trace(Phi) / L`. The result must reproduce
/// the targets through the original matrix within `1e-8 (1 + max |Y|)`;
/// when the first solve misses that bound, correction sweeps reusing the
/// factorization pull the residual down until the bound is met or progress
/// stalls.
pub fn fit_coefficients(
    phi: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, FitDiagnostics)> {
    let l = phi.nrows();
    if phi.ncols() != l {
        return Err(RbfError::ShapeMismatch(format!(
            "kernel matrix is {} x {}",
            phi.nrows(),
            phi.ncols()
        )));
    }
    if targets.nrows() != l {
        return Err(RbfError::ShapeMismatch(format!(
            "{} targets for {} centers",
            targets.nrows(),
            l
        )));
    }

    let lu = phi.clone().lu();
    let condition = match inverse_norm1_estimate(&lu, l) {
        Some(inv_norm) => norm1(phi) * inv_norm,
        None => f64::INFINITY,
    };

    let (mut coeffs, jitter, solve_lu) = if condition <= CONDITION_LIMIT {
        let c = lu
            .solve(targets)
            .ok_or(RbfError::Singular { condition })?;
        (c, None, lu)
    } else {
        let jitter = JITTER_FACTOR * phi.diagonal().sum() / l as f64;
        let mut damped = phi.clone();
        for i in 0..l {
            damped[(i, i)] += jitter;
        }
        let damped_lu = damped.lu();
        let c = damped_lu
            .solve(targets)
            .ok_or(RbfError::Singular { condition })?;
        (c, Some(jitter), damped_lu)
    };

    let bound = RESIDUAL_FACTOR * (1.0 + targets.amax());
    let mut residual = (phi * &coeffs - targets).amax();
    let mut refinement_sweeps = 0;
    while !(residual <= bound) && refinement_sweeps < REFINEMENT_SWEEP_LIMIT {
        let correction = match solve_lu.solve(&(targets - phi * &coeffs)) {
            Some(c) => c,
            None => break,
        };
        let refined = &coeffs + correction;
        let refined_residual = (phi * &refined - targets).amax();
        if !(refined_residual < residual) {
            break;
        }
        coeffs = refined;
        residual = refined_residual;
        refinement_sweeps += 1;
    }
    if !(residual <= bound) {
        return Err(RbfError::ResidualTooLarge { residual, bound });
    }
    Ok((
        coeffs,
        FitDiagnostics {
            condition_estimate: condition,
            jitter,
            refinement_sweeps,
        },
    ))
}

/// Estimates `||Phi^-1||_1` from the factorization alone via Hager's power
/// iteration on the dual norm, the same scheme dense linear-algebra libraries
/// use for condition estimates. Each sweep costs two triangular solves, so
/// the estimate avoids forming the inverse. The transpose system reuses the
/// same factorization because the kernel matrix is symmetric. Returns `None`
/// when the factorization cannot solve at all (zero pivot).
fn inverse_norm1_estimate(
    lu: &nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
) -> Option<f64> {
    if n == 0 {
        return Some(0.0);
    }
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut best = 0.0_f64;
    for _ in 0..5 {
        let y = lu.solve(&x)?;
        best = best.max(y.iter().map(|v| v.abs()).sum());
        let signs = y.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
        let z = lu.solve(&signs)?;
        let j = (0..n).max_by(|&a, &b| z[a].abs().total_cmp(&z[b].abs()))?;
        if z[j].abs() <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[j] = 1.0;
    }
    // LAPACK-style refinement probe: an alternating ramp vector catches
    // inverses whose mass the unit-vector iteration misses.
    let ramp = DVector::from_fn(n, |i, _| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
    });
    let y = lu.solve(&ramp)?;
    let ramp_norm = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
    Some(best.max(ramp_norm))
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// A fitted per-dimension Gaussian RBF interpolator.
#[derive(Debug, Clone)]
pub struct RbfInterpolator {
    centers: DMatrix<f64>,
    scales: Vec<f64>,
    coeffs: DMatrix<f64>,
    diagnostics: Vec<FitDiagnostics>,
}

impl RbfInterpolator {
    /// Fits coefficients so that `f(a_l) = y_l` for every center, one solve
    /// per distinct scale value.
    pub fn fit(centers: DMatrix<f64>, targets: &DMatrix<f64>, scales: Vec<f64>) -> Result<Self> {
        let l = centers.nrows();
        let d = targets.ncols();
        if targets.nrows() != l {
            return Err(RbfError::ShapeMismatch(format!(
                "{} targets for {} centers",
                targets.nrows(),
                l
            )));
        }
        if scales.len() != d {
            return Err(RbfError::ShapeMismatch(format!(
                "{} scales for {} target dimensions",
                scales.len(),
                d
            )));
        }
        for &s in &scales {
            if !(s > 0.0) {
                return Err(RbfError::BadScale(s));
            }
        }

        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (k, &s) in scales.iter().enumerate() {
            groups.entry(s.to_bits()).or_default().push(k);
        }

        let mut coeffs = DMatrix::zeros(l, d);
        let mut diagnostics = vec![
            FitDiagnostics {
                condition_estimate: f64::NAN,
                jitter: None,
                refinement_sweeps: 0,
            };
            d
        ];
        for (bits, dims) in groups {
            let sigma = f64::from_bits(bits);
            let phi = build_kernel_matrix(&centers, &centers, sigma)?;
            let mut sub = DMatrix::zeros(l, dims.len());
            for (j, &k) in dims.iter().enumerate() {
                sub.set_column(j, &targets.column(k));
            }
            let (c, diag) = fit_coefficients(&phi, &sub)?;
            for (j, &k) in dims.iter().enumerate() {
                coeffs.set_column(k, &c.column(j));
                diagnostics[k] = diag;
            }
        }
        Ok(Self {
            centers,
            scales,
            coeffs,
            diagnostics,
        })
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn diagnostics(&self) -> &[FitDiagnostics] {
        &self.diagnostics
    }

    /// L: number of kernel centers.
    pub fn len(&self) -> usize {
        self.centers.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.nrows() == 0
    }

    /// n: ambient dimension.
    pub fn ambient_dim(&self) -> usize {
        self.centers.ncols()
    }

    /// d: embedding dimension.
    pub fn dim(&self) -> usize {
        self.coeffs.ncols()
    }

    /// Evaluates all output dimensions at `x`.
    pub fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ambient_dim(), "probe dimension mismatch");
        let d = self.dim();
        let mut out = DVector::zeros(d);
        for l in 0..self.len() {
            let mut d2 = 0.0;
            for c in 0..self.ambient_dim() {
                let diff = x[c] - self.centers[(l, c)];
                d2 += diff * diff;
            }
            for k in 0..d {
                let s = self.scales[k];
                out[k] += self.coeffs[(l, k)] * (-d2 / (s * s)).exp();
            }
        }
        out
    }

    pub fn evaluate_dim(&self, k: usize, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.ambient_dim(), "probe dimension mismatch");
        let s = self.scales[k];
        let inv_s2 = 1.0 / (s * s);
        let mut acc = 0.0;
        for l in 0..self.len() {
            let mut d2 = 0.0;
            for c in 0..self.ambient_dim() {
                let diff = x[c] - self.centers[(l, c)];
                d2 += diff * diff;
            }
            acc += self.coeffs[(l, k)] * (-d2 * inv_s2).exp();
        }
        acc
    }

    /// Evaluates every row of `xs`, returning a rows x d matrix.
    pub fn evaluate_rows(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(xs.nrows(), self.dim());
        for i in 0..xs.nrows() {
            let v = self.evaluate(&xs.row(i).transpose());
            out.set_row(i, &v.transpose());
        }
        out
    }

    /// Analytic gradient of output dimension `k` at `x`:
    /// `sum_l c_lk exp(-||x - a_l||^2 / s^2) (-2 / s^2) (x - a_l)`.
    pub fn gradient_dim(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ambient_dim(), "probe dimension mismatch");
        let s = self.scales[k];
        let inv_s2 = 1.0 / (s * s);
        let mut weight_sum = 0.0;
        let mut weighted_centers = DVector::zeros(self.ambient_dim());
        for l in 0..self.len() {
            let mut d2 = 0.0;
            for c in 0..self.ambient_dim() {
                let diff = x[c] - self.centers[(l, c)];
                d2 += diff * diff;
            }
            let w = self.coeffs[(l, k)] * (-d2 * inv_s2).exp();
            weight_sum += w;
            for c in 0..self.ambient_dim() {
                weighted_centers[c] += w * self.centers[(l, c)];
            }
        }
        let mut grad = x * weight_sum - weighted_centers;
        grad *= -2.0 * inv_s2;
        grad
    }

    /// Writes the interpolator as a little-endian binary file:
    /// magic, `L n d` as u64, scales, centers row-major, coefficients
    /// row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |e| RbfError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.len() as u64).map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.ambient_dim() as u64)
            .map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.dim() as u64).map_err(io_err)?;
        for &s in &self.scales {
            w.write_f64::<LittleEndian>(s).map_err(io_err)?;
        }
        for i in 0..self.len() {
            for j in 0..self.ambient_dim() {
                w.write_f64::<LittleEndian>(self.centers[(i, j)]).map_err(io_err)?;
            }
        }
        for i in 0..self.len() {
            for j in 0..self.dim() {
                w.write_f64::<LittleEndian>(self.coeffs[(i, j)]).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Reads a file produced by [`RbfInterpolator::save`]. Fit diagnostics
    /// are not stored and come back empty.
    pub fn load(path: &Path) -> Result<Self> {
        let io_err = |e| RbfError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let format_err = |message: String| RbfError::Format {
            path: path.to_path_buf(),
            message,
        };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut r = std::io::BufReader::new(file);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let l = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let d = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        if l == 0 || n == 0 || d == 0 {
            return Err(format_err(format!("degenerate shape {l} x {n} x {d}")));
        }

        let mut scales = Vec::with_capacity(d);
        for _ in 0..d {
            scales.push(r.read_f64::<LittleEndian>().map_err(io_err)?);
        }
        let mut centers = DMatrix::zeros(l, n);
        for i in 0..l {
            for j in 0..n {
                centers[(i, j)] = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
        }
        let mut coeffs = DMatrix::zeros(l, d);
        for i in 0..l {
            for j in 0..d {
                coeffs[(i, j)] = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(format_err("trailing bytes".into())),
            Err(e) => return Err(io_err(e)),
        }
        Ok(Self {
            centers,
            scales,
            coeffs,
            diagnostics: Vec::new(),
        })
    }
}

/// Per-dimension regularizer terms measured at the training points.
#[derive(Debug, Clone)]
pub struct DimTerms {
    /// Sum over points of `||grad|| / mean_v |grad . v|`.
    pub gradient_term: f64,
    /// Sum over separable pairs and their points of
    /// `mean_u |grad . u| / mean_v |grad . v|` with `u` restricted to the
    /// opposing class.
    pub separation_term: f64,
    pub points_counted: usize,
    pub points_skipped: usize,
    pub pair_terms_counted: usize,
    pub pair_terms_skipped: usize,
}

impl DimTerms {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.gradient_term - lambda * self.separation_term
    }
}

#[derive(Debug, Clone)]
pub struct RegularizerReport {
    pub per_dim: Vec<DimTerms>,
    pub lambda: f64,
}

impl RegularizerReport {
    /// Total objective: `sum_k (gradient_term_k - lambda separation_term_k)`.
    pub fn total(&self) -> f64 {
        self.per_dim.iter().map(|t| t.objective(self.lambda)).sum()
    }
}

/// Evaluates the gradient and separation terms of `f` at the rows of `x`.
///
/// `nbrs` must index the rows of `x`; `pairs` must describe `f.dim()`
/// dimensions. Points whose mean directional derivative falls below 1e-12
/// are skipped and counted; a dimension where every point is skipped is an
/// error.
pub fn regularization_terms(
    f: &RbfInterpolator,
    x: &DMatrix<f64>,
    labels: &[usize],
    nbrs: &NeighborTable,
    pairs: &SeparablePairs,
    lambda: f64,
) -> Result<RegularizerReport> {
    let n = x.nrows();
    if labels.len() != n || nbrs.len() != n {
        return Err(RbfError::ShapeMismatch(format!(
            "{} labels and {} neighbor lists for {} points",
            labels.len(),
            nbrs.len(),
            n
        )));
    }
    if pairs.dims() != f.dim() {
        return Err(RbfError::ShapeMismatch(format!(
            "separable pairs cover {} dimensions, interpolator has {}",
            pairs.dims(),
            f.dim()
        )));
    }
    if x.ncols() != f.ambient_dim() {
        return Err(RbfError::ShapeMismatch(format!(
            "points have {} coordinates, interpolator expects {}",
            x.ncols(),
            f.ambient_dim()
        )));
    }

    // Unit directions from each point toward its neighbors; shared by all
    // dimensions.
    let directions: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|i| {
            nbrs.neighbors(i)
                .iter()
                .map(|&j| {
                    let mut v = (x.row(i) - x.row(j)).transpose();
                    let norm = v.norm();
                    if norm > 0.0 {
                        v /= norm;
                    }
                    v
                })
                .collect()
        })
        .collect();

    let mut per_dim = Vec::with_capacity(f.dim());
    for k in 0..f.dim() {
        let mut terms = DimTerms {
            gradient_term: 0.0,
            separation_term: 0.0,
            points_counted: 0,
            points_skipped: 0,
            pair_terms_counted: 0,
            pair_terms_skipped: 0,
        };
        let mut gradients: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut denominators: Vec<Option<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let g = f.gradient_dim(k, &x.row(i).transpose());
            let dirs = &directions[i];
            let denom =
                dirs.iter().map(|v| g.dot(v).abs()).sum::<f64>() / dirs.len().max(1) as f64;
            if denom < DENOMINATOR_FLOOR {
                terms.points_skipped += 1;
                denominators.push(None);
            } else {
                terms.gradient_term += g.norm() / denom;
                terms.points_counted += 1;
                denominators.push(Some(denom));
            }
            gradients.push(g);
        }
        if terms.points_counted == 0 {
            return Err(RbfError::DegenerateRegularizer { dim: k });
        }

        for &(m, p) in pairs.pairs(k) {
            // A separable pair contributes from both sides of the boundary.
            for (from, to) in [(m, p), (p, m)] {
                for i in 0..n {
                    if labels[i] != from {
                        continue;
                    }
                    let Some(denom) = denominators[i] else {
                        terms.pair_terms_skipped += 1;
                        continue;
                    };
                    let mut cross = 0.0;
                    let mut count = 0usize;
                    for (slot, &j) in nbrs.neighbors(i).iter().enumerate() {
                        if labels[j] == to {
                            cross += gradients[i].dot(&directions[i][slot]).abs();
                            count += 1;
                        }
                    }
                    if count == 0 {
                        terms.pair_terms_skipped += 1;
                        continue;
                    }
                    terms.separation_term += (cross / count as f64) / denom;
                    terms.pair_terms_counted += 1;
                }
            }
        }
        per_dim.push(terms);
    }
    Ok(RegularizerReport { per_dim, lambda })
}

/// How a per-dimension scale is picked from the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleSelection {
    /// Smallest regularizer objective `gradient - lambda * separation`;
    /// pairs with embeddings whose eigenvectors order by smallest
    /// eigenvalue.
    MinimizeObjective,
    /// Largest scale whose separation/gradient ratio reaches the threshold;
    /// pairs with the Fisher-style embedding.
    LargestAboveRatio { threshold: f64 },
}

/// Default grid: 20 log-spaced scales from half the median K-NN distance to
/// five times the maximum pairwise distance.
pub fn default_sigma_grid(x: &DMatrix<f64>, nbrs: &NeighborTable) -> Result<Vec<f64>> {
    let lo = 0.5 * nbrs.median_distance();
    let hi = 5.0 * crate::graph::max_pairwise_distance(x);
    if !(hi > 0.0) {
        return Err(RbfError::EmptyGrid);
    }
    let lo = if lo > 0.0 { lo } else { hi * 1e-6 };
    Ok(log_spaced_grid(lo, hi, 20))
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 0 || !(lo > 0.0) || !(hi >= lo) {
        return Vec::new();
    }
    if count == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln();
    (0..count)
        .map(|i| lo * (ratio * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Picks one kernel scale per target dimension from `grid`.
///
/// Grid points where the fit fails or the regularizer degenerates are
/// inadmissible for the affected dimensions. The selected values are then
/// clamped to two standard deviations around their mean.
pub fn optimize_scales(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    labels: &[usize],
    nbrs: &NeighborTable,
    pairs: &SeparablePairs,
    lambda: f64,
    grid: &[f64],
    selection: ScaleSelection,
) -> Result<Vec<f64>> {
    optimize_scales_with_eval(x, targets, x, labels, nbrs, pairs, lambda, grid, selection)
}

/// [`optimize_scales`] with separate fit and evaluation sets: candidate
/// interpolators are fitted on `fit_x`/`fit_targets` while the regularizer
/// is measured at `eval_x`, whose labels, neighbor table, and separable
/// pairs are given.
#[allow(clippy::too_many_arguments)]
pub fn optimize_scales_with_eval(
    fit_x: &DMatrix<f64>,
    fit_targets: &DMatrix<f64>,
    eval_x: &DMatrix<f64>,
    eval_labels: &[usize],
    nbrs: &NeighborTable,
    pairs: &SeparablePairs,
    lambda: f64,
    grid: &[f64],
    selection: ScaleSelection,
) -> Result<Vec<f64>> {
    let d = fit_targets.ncols();
    let mut grid: Vec<f64> = grid.to_vec();
    grid.retain(|s| *s > 0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.is_empty() {
        return Err(RbfError::EmptyGrid);
    }

    // terms[g][k] = regularizer terms for grid point g, dimension k (if
    // admissible).
    let mut terms: Vec<Vec<Option<DimTerms>>> = Vec::with_capacity(grid.len());
    for &sigma in &grid {
        let row = match RbfInterpolator::fit(fit_x.clone(), fit_targets, vec![sigma; d]) {
            Ok(f) => match regularization_terms(&f, eval_x, eval_labels, nbrs, pairs, lambda) {
                Ok(report) => report.per_dim.into_iter().map(Some).collect(),
                Err(RbfError::DegenerateRegularizer { .. }) => vec![None; d],
                Err(e) => return Err(e),
            },
            Err(RbfError::Singular { .. }) | Err(RbfError::ResidualTooLarge { .. }) => {
                vec![None; d]
            }
            Err(e) => return Err(e),
        };
        terms.push(row);
    }

    let mut scales = Vec::with_capacity(d);
    for k in 0..d {
        let admissible: Vec<(f64, &DimTerms)> = grid
            .iter()
            .zip(&terms)
            .filter_map(|(&sigma, row)| row[k].as_ref().map(|t| (sigma, t)))
            .collect();
        if admissible.is_empty() {
            return Err(RbfError::NoAdmissibleScale { dim: k });
        }
        let chosen = match selection {
            ScaleSelection::MinimizeObjective => {
                admissible
                    .iter()
                    .fold(None::<(f64, f64)>, |best, &(sigma, t)| {
                        let obj = t.objective(lambda);
                        match best {
                            Some((_, best_obj)) if best_obj <= obj => best,
                            _ => Some((sigma, obj)),
                        }
                    })
                    .map(|(sigma, _)| sigma)
            }
            ScaleSelection::LargestAboveRatio { threshold } => admissible
                .iter()
                .rev()
                .find(|(_, t)| {
                    t.gradient_term > 0.0 && t.separation_term / t.gradient_term >= threshold
                })
                .map(|&(sigma, _)| sigma),
        };
        match chosen {
            Some(sigma) => scales.push(sigma),
            None => return Err(RbfError::NoAdmissibleScale { dim: k }),
        }
    }

    clamp_to_two_stddev(&mut scales);
    Ok(scales)
}

/// Clamps each value to `mean +/- 2 stddev` of the set (population
/// standard deviation). A single value is left untouched.
pub fn clamp_to_two_stddev(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let spread = 2.0 * var.sqrt();
    for v in values.iter_mut() {
        *v = v.clamp(mean - spread, mean + spread);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{separable_pairs, Embedding, EmbeddingMethod};
    use crate::graph::knn_neighbors;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix_from(rows: &[&[f64]]) -> DMatrix<f64> {
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DMatrix::from_row_slice(rows.len(), n, &flat)
    }

    fn random_config(
        rng: &mut ChaCha8Rng,
        l: usize,
        n: usize,
        d: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        // Spread-out centers keep the kernel matrix comfortably conditioned.
        let mut centers = DMatrix::zeros(l, n);
        for i in 0..l {
            for j in 0..n {
                centers[(i, j)] = rng.gen_range(-3.0..3.0);
            }
        }
        let mut targets = DMatrix::zeros(l, d);
        for i in 0..l {
            for j in 0..d {
                targets[(i, j)] = rng.gen_range(-2.0..2.0);
            }
        }
        let scales: Vec<f64> = (0..d).map(|_| rng.gen_range(0.8..2.5)).collect();
        (centers, targets, scales)
    }

    #[test]
    fn two_point_fit_matches_closed_form() {
        let centers = matrix_from(&[&[0.0], &[1.0]]);
        let targets = matrix_from(&[&[2.0], &[-1.0]]);
        let sigma = 1.3;
        let f = RbfInterpolator::fit(centers, &targets, vec![sigma]).unwrap();
        // Phi = [[1, e], [e, 1]] with e = exp(-1/sigma^2); invert by hand.
        let e = (-1.0 / (sigma * sigma)).exp();
        let det = 1.0 - e * e;
        let c0 = (2.0 - e * -1.0) / det;
        let c1 = (-1.0 - e * 2.0) / det;
        assert!((f.coeffs()[(0, 0)] - c0).abs() < 1e-12);
        assert!((f.coeffs()[(1, 0)] - c1).abs() < 1e-12);
    }

    #[test]
    fn fit_reproduces_targets_at_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (centers, targets, scales) = random_config(&mut rng, 25, 4, 3);
            let f = RbfInterpolator::fit(centers.clone(), &targets, scales).unwrap();
            let bound = 1e-8 * (1.0 + targets.amax());
            for i in 0..25 {
                let y = f.evaluate(&centers.row(i).transpose());
                for k in 0..3 {
                    assert!((y[k] - targets[(i, k)]).abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn kernel_matrix_entries() {
        let centers = matrix_from(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let eval = matrix_from(&[&[0.0, 0.0]]);
        let phi = build_kernel_matrix(&eval, &centers, 2.0).unwrap();
        assert_eq!(phi[(0, 0)], 1.0);
        assert!((phi[(0, 1)] - (-2.0f64 / 4.0).exp()).abs() < 1e-15);
        assert!(build_kernel_matrix(&eval, &centers, 0.0).is_err());
    }

    #[test]
    fn near_duplicate_centers_take_jitter_path() {
        let centers = matrix_from(&[&[0.0], &[1e-9]]);
        let targets = matrix_from(&[&[1.0], &[1.0]]);
        let f = RbfInterpolator::fit(centers, &targets, vec![1.0]).unwrap();
        let diag = f.diagnostics()[0];
        assert!(diag.condition_estimate > 1e12);
        let jitter = diag.jitter.expect("jitter should be recorded");
        assert!((jitter - 1e-10).abs() < 1e-25);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (centers, targets, scales) = random_config(&mut rng, 20, 3, 2);
        let f = RbfInterpolator::fit(centers, &targets, scales).unwrap();
        for _ in 0..10 {
            let x = DVector::from_iterator(3, (0..3).map(|_| rng.gen_range(-2.5..2.5)));
            for k in 0..2 {
                let g = f.gradient_dim(k, &x);
                let h = 1e-5 * f.scales()[k];
                for c in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (f.evaluate_dim(k, &xp) - f.evaluate_dim(k, &xm)) / (2.0 * h);
                    let scale = g[c].abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (g[c] - fd).abs() <= 1e-5 * scale,
                        "dim {k} coord {c}: analytic {} vs fd {fd}",
                        g[c]
                    );
                }
            }
        }
    }

    fn toy_regularizer_setup() -> (
        DMatrix<f64>,
        Vec<usize>,
        crate::graph::NeighborTable,
        SeparablePairs,
        RbfInterpolator,
    ) {
        // Two horizontal rows of points, one per class.
        let x = matrix_from(&[
            &[0.0, 0.0],
            &[1.0, 0.1],
            &[2.0, 0.0],
            &[0.0, 2.0],
            &[1.0, 1.9],
            &[2.0, 2.0],
        ]);
        let labels = vec![1, 1, 1, 2, 2, 2];
        let targets = matrix_from(&[&[-1.0], &[-0.9], &[-1.1], &[1.0], &[1.05], &[0.95]]);
        let nbrs = knn_neighbors(&x, 3).unwrap();
        let emb = Embedding::from_coords(
            targets.clone(),
            vec![0.0],
            EmbeddingMethod::SupervisedLaplacian { mu: 1.0 },
        );
        let pairs = separable_pairs(&emb, &labels).unwrap();
        assert_eq!(pairs.pairs(0), &[(1, 2)]);
        let f = RbfInterpolator::fit(x.clone(), &targets, vec![1.5]).unwrap();
        (x, labels, nbrs, pairs, f)
    }

    #[test]
    fn regularizer_matches_finite_difference_oracle() {
        let (x, labels, nbrs, pairs, f) = toy_regularizer_setup();
        let report = regularization_terms(&f, &x, &labels, &nbrs, &pairs, 1.0).unwrap();

        // Independent recomputation: directional derivatives by central
        // differences along each neighbor direction, gradient norm from the
        // same derivatives stacked over the coordinate axes.
        let h = 1e-6;
        let fd_dir = |p: &DVector<f64>, v: &DVector<f64>| {
            let xp = p + v * h;
            let xm = p - v * h;
            (f.evaluate_dim(0, &xp) - f.evaluate_dim(0, &xm)) / (2.0 * h)
        };
        let mut g_term = 0.0;
        let mut d_term = 0.0;
        for i in 0..x.nrows() {
            let p = x.row(i).transpose();
            let axes: Vec<DVector<f64>> = (0..2)
                .map(|c| DVector::from_fn(2, |r, _| if r == c { 1.0 } else { 0.0 }))
                .collect();
            let grad_norm = axes.iter().map(|a| fd_dir(&p, a).powi(2)).sum::<f64>().sqrt();
            let dirs: Vec<DVector<f64>> = nbrs
                .neighbors(i)
                .iter()
                .map(|&j| {
                    let v = (x.row(i) - x.row(j)).transpose();
                    let norm = v.norm();
                    v / norm
                })
                .collect();
            let denom =
                dirs.iter().map(|v| fd_dir(&p, v).abs()).sum::<f64>() / dirs.len() as f64;
            g_term += grad_norm / denom;

            let other = if labels[i] == 1 { 2 } else { 1 };
            let mut cross = 0.0;
            let mut count = 0;
            for (slot, &j) in nbrs.neighbors(i).iter().enumerate() {
                if labels[j] == other {
                    cross += fd_dir(&p, &dirs[slot]).abs();
                    count += 1;
                }
            }
            if count > 0 {
                d_term += (cross / count as f64) / denom;
            }
        }
        let t = &report.per_dim[0];
        assert!(
            (t.gradient_term - g_term).abs() <= 1e-5 * g_term.abs(),
            "gradient term {} vs oracle {g_term}",
            t.gradient_term
        );
        assert!(
            (t.separation_term - d_term).abs() <= 1e-5 * d_term.abs().max(1e-12),
            "separation term {} vs oracle {d_term}",
            t.separation_term
        );
    }

    #[test]
    fn regularizer_terms_are_coefficient_scale_invariant() {
        let (x, labels, nbrs, pairs, f) = toy_regularizer_setup();
        let base = regularization_terms(&f, &x, &labels, &nbrs, &pairs, 1.0).unwrap();

        let scaled_targets = {
            let mut t = DMatrix::zeros(x.nrows(), 1);
            for i in 0..x.nrows() {
                t[(i, 0)] = 7.0 * f.evaluate_dim(0, &x.row(i).transpose());
            }
            t
        };
        let f7 = RbfInterpolator::fit(x.clone(), &scaled_targets, vec![1.5]).unwrap();
        let scaled = regularization_terms(&f7, &x, &labels, &nbrs, &pairs, 1.0).unwrap();

        let a = &base.per_dim[0];
        let b = &scaled.per_dim[0];
        assert!((a.gradient_term - b.gradient_term).abs() <= 1e-6 * a.gradient_term);
        assert!(
            (a.separation_term - b.separation_term).abs()
                <= 1e-6 * a.separation_term.abs().max(1e-12)
        );
    }

    #[test]
    fn one_dimensional_points_give_unit_gradient_ratio() {
        // On a line every neighbor direction is +/-1, so each counted point
        // contributes exactly 1 to the gradient term.
        let x = matrix_from(&[&[0.0], &[1.0], &[2.5]]);
        let targets = matrix_from(&[&[0.3], &[-0.2], &[0.8]]);
        let labels = vec![1, 1, 1];
        let nbrs = knn_neighbors(&x, 1).unwrap();
        let emb = Embedding::from_coords(
            targets.clone(),
            vec![0.0],
            EmbeddingMethod::SupervisedLaplacian { mu: 1.0 },
        );
        let pairs = separable_pairs(&emb, &labels).unwrap();
        let f = RbfInterpolator::fit(x.clone(), &targets, vec![1.0]).unwrap();
        let report = regularization_terms(&f, &x, &labels, &nbrs, &pairs, 1.0).unwrap();
        let t = &report.per_dim[0];
        assert_eq!(t.points_counted, 3);
        assert!((t.gradient_term - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_targets_degenerate_the_regularizer() {
        let x = matrix_from(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let targets = DMatrix::zeros(3, 1);
        let labels = vec![1, 1, 2];
        let nbrs = knn_neighbors(&x, 2).unwrap();
        let emb = Embedding::from_coords(
            DMatrix::from_row_slice(3, 1, &[-1.0, -1.0, 1.0]),
            vec![0.0],
            EmbeddingMethod::SupervisedLaplacian { mu: 1.0 },
        );
        let pairs = separable_pairs(&emb, &labels).unwrap();
        let f = RbfInterpolator::fit(x.clone(), &targets, vec![1.0]).unwrap();
        let err = regularization_terms(&f, &x, &labels, &nbrs, &pairs, 1.0).unwrap_err();
        assert!(matches!(err, RbfError::DegenerateRegularizer { dim: 0 }));
    }

    #[test]
    fn clamp_engages_on_outlier_heavy_sets() {
        let mut v: Vec<f64> = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0];
        let mean: f64 = 107.0 / 8.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        let hi = mean + 2.0 * var.sqrt();
        clamp_to_two_stddev(&mut v);
        assert!((v[7] - hi).abs() < 1e-12);
        assert!(v[7] < 100.0);
        for x in &v[..7] {
            assert_eq!(*x, 1.0);
        }
    }

    #[test]
    fn clamp_leaves_in_range_values_alone() {
        // With a single large outlier among four values the two-stddev band
        // still contains everything, so nothing moves.
        let mut v = vec![1.0, 1.0, 1.0, 100.0];
        clamp_to_two_stddev(&mut v);
        assert_eq!(v, vec![1.0, 1.0, 1.0, 100.0]);
    }

    #[test]
    fn optimize_scales_returns_grid_members_per_mode() {
        let (x, labels, nbrs, pairs, _) = toy_regularizer_setup();
        let targets = matrix_from(&[&[-1.0], &[-0.9], &[-1.1], &[1.0], &[1.05], &[0.95]]);
        let grid = log_spaced_grid(0.5, 8.0, 10);

        let scales = optimize_scales(
            &x,
            &targets,
            &labels,
            &nbrs,
            &pairs,
            1.0,
            &grid,
            ScaleSelection::MinimizeObjective,
        )
        .unwrap();
        assert_eq!(scales.len(), 1);
        assert!(grid.iter().any(|&g| (g - scales[0]).abs() < 1e-12));

        let fisher = optimize_scales(
            &x,
            &targets,
            &labels,
            &nbrs,
            &pairs,
            1.0,
            &grid,
            ScaleSelection::LargestAboveRatio { threshold: 0.2 },
        )
        .unwrap();
        // The threshold rule picks the largest admissible scale, so no
        // smaller grid point may satisfy the ratio above it.
        let idx = grid
            .iter()
            .position(|&g| (g - fisher[0]).abs() < 1e-12)
            .expect("fisher scale should be a grid member");
        for &sigma in &grid[idx + 1..] {
            let f = RbfInterpolator::fit(x.clone(), &targets, vec![sigma]).unwrap();
            let r = regularization_terms(&f, &x, &labels, &nbrs, &pairs, 1.0).unwrap();
            let t = &r.per_dim[0];
            assert!(t.separation_term / t.gradient_term < 0.2);
        }
    }

    #[test]
    fn fisher_mode_errors_when_no_scale_reaches_threshold() {
        let (x, labels, nbrs, pairs, _) = toy_regularizer_setup();
        let targets = matrix_from(&[&[-1.0], &[-0.9], &[-1.1], &[1.0], &[1.05], &[0.95]]);
        let grid = log_spaced_grid(0.5, 8.0, 10);
        let err = optimize_scales(
            &x,
            &targets,
            &labels,
            &nbrs,
            &pairs,
            1.0,
            &grid,
            ScaleSelection::LargestAboveRatio { threshold: 1e6 },
        )
        .unwrap_err();
        assert!(matches!(err, RbfError::NoAdmissibleScale { dim: 0 }));
    }

    #[test]
    fn serialization_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (centers, targets, scales) = random_config(&mut rng, 12, 3, 2);
        let f = RbfInterpolator::fit(centers, &targets, scales).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rbf");
        f.save(&path).unwrap();
        let g = RbfInterpolator::load(&path).unwrap();
        assert_eq!(f.scales(), g.scales());
        for _ in 0..5 {
            let x = DVector::from_iterator(3, (0..3).map(|_| rng.gen_range(-2.0..2.0)));
            let a = f.evaluate(&x);
            let b = g.evaluate(&x);
            for k in 0..2 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rbf");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            RbfInterpolator::load(&path),
            Err(RbfError::Format { .. }) | Err(RbfError::Io { .. })
        ));

        // Valid file with trailing garbage.
        let centers = matrix_from(&[&[0.0], &[1.0]]);
        let targets = matrix_from(&[&[1.0], &[2.0]]);
        let f = RbfInterpolator::fit(centers, &targets, vec![1.0]).unwrap();
        let path2 = dir.path().join("trail.rbf");
        f.save(&path2).unwrap();
        let mut bytes = std::fs::read(&path2).unwrap();
        bytes.push(0);
        std::fs::write(&path2, bytes).unwrap();
        assert!(matches!(
            RbfInterpolator::load(&path2),
            Err(RbfError::Format { .. })
        ));
    }
}
