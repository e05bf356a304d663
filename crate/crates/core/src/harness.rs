//! Experiment protocols and machine-readable reports.
//!
//! Three protocols share one config format: a labeled-ratio sweep, an
//! iterative retraining comparison, and a kernel-scale sweep. Every
//! protocol emits rows with the fixed header
//! `experiment,strategy,x,seed,error_pct,wall_ms`, where `x` is the ratio,
//! the center-count ratio `L_r / N`, or the scale, respectively. A failed
//! cell keeps its row with an empty `error_pct` so that row accounting
//! stays exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::baselines::{
    classify_nn_ambient, extend_lle, extend_nystrom, ssl_gaussian_fields, KernelRidge,
};
use crate::dataset::{
    load_image_dirs, load_matrix_csv, split_labels, synthetic_curves, Dataset, DatasetError,
};
use crate::embedding::{
    fisher_nonlinear, separable_pairs, supervised_laplacian, Embedding, EmbeddingMethod,
};
use crate::graph::{knn_neighbors, ClassGraphs, NeighborTable};
use crate::rbf::{log_spaced_grid, regularization_terms, RbfInterpolator, ScaleSelection};
use crate::sosi::{
    self, classify_in_embedding, equispaced_schedule, nn_classify_confidence, SosiConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report parse error at {path} line {line}: {message}")]
    Report {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("strategy failed: {0}")]
    Cell(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Classification strategies the experiments can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    Sosi,
    RbfFit,
    Lle,
    Nystrom,
    NnAmbient,
    SslGf,
    KernelRidge,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sosi => "sosi",
            Strategy::RbfFit => "rbf-fit",
            Strategy::Lle => "lle",
            Strategy::Nystrom => "nystrom",
            Strategy::NnAmbient => "nn-ambient",
            Strategy::SslGf => "ssl-gf",
            Strategy::KernelRidge => "kernel-ridge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sosi" => Some(Strategy::Sosi),
            "rbf-fit" => Some(Strategy::RbfFit),
            "lle" => Some(Strategy::Lle),
            "nystrom" => Some(Strategy::Nystrom),
            "nn" | "nn-ambient" => Some(Strategy::NnAmbient),
            "ssl-gf" => Some(Strategy::SslGf),
            "kridge" | "kernel-ridge" => Some(Strategy::KernelRidge),
            _ => None,
        }
    }
}

/// Where the samples come from. Synthetic data is drawn fresh per seed;
/// file-backed data is fixed and only the labeled/unlabeled split varies.
#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        noise: f64,
    },
    Csv {
        features: PathBuf,
        labels: PathBuf,
        header: bool,
    },
    ImageDirs {
        root: PathBuf,
        resize: (u32, u32),
    },
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> std::result::Result<Dataset, DatasetError> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                noise,
            } => synthetic_curves(*classes, *per_class, *noise, seed),
            DatasetSpec::Csv {
                features,
                labels,
                header,
            } => load_matrix_csv(features, labels, *header),
            DatasetSpec::ImageDirs { root, resize } => load_image_dirs(root, *resize),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub method: EmbeddingMethod,
    pub dim: usize,
    /// Neighbor count shared by the embedding graph, the regularizer, and
    /// the label-propagation graph.
    pub knn: usize,
    /// Kernel scale for graph weights; `None` uses the median K-NN distance
    /// of whichever point set the graph is built on.
    pub graph_sigma: Option<f64>,
    pub strategies: Vec<Strategy>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Center-schedule length for the progressive runs.
    pub iterations: usize,
    pub lambda: f64,
    pub k_proj: usize,
    pub early_stop_fraction: f64,
    pub reoptimize_scales: bool,
    pub scale_selection: ScaleSelection,
    pub sigma_grid: Option<Vec<f64>>,
    /// Neighbor count for the locally linear extension.
    pub lle_k: usize,
    pub ridge_penalty: f64,
    /// Common-scale grid for the scale-sweep protocol.
    pub sigma_sweep: Option<Vec<f64>>,
    /// When false, `wall_ms` is written as 0 so reports are byte-stable.
    pub timing: bool,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    fn sosi_config(&self, n: usize, q: usize) -> SosiConfig {
        SosiConfig {
            schedule: equispaced_schedule(n, q, self.iterations),
            lambda: self.lambda,
            k_proj: self.k_proj,
            early_stop_fraction: self.early_stop_fraction,
            reoptimize_scales: self.reoptimize_scales,
            knn: self.knn,
            scale_selection: self.scale_selection,
            sigma_grid: self.sigma_grid.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(HarnessError::Config("no strategies configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.ratios.is_empty() {
            return Err(HarnessError::Config("at least one ratio is required".into()));
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r < 1.0) {
                return Err(HarnessError::Config(format!(
                    "ratio {r} outside (0, 1)"
                )));
            }
        }
        if self.dim == 0 {
            return Err(HarnessError::Config("dim must be positive".into()));
        }
        if self.knn == 0 {
            return Err(HarnessError::Config("knn must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(HarnessError::Config("iterations must be positive".into()));
        }
        if self.lle_k == 0 {
            return Err(HarnessError::Config("lle_k must be positive".into()));
        }
        if !(self.ridge_penalty >= 0.0) {
            return Err(HarnessError::Config(format!(
                "ridge_penalty must be nonnegative, got {}",
                self.ridge_penalty
            )));
        }
        Ok(())
    }
}

/// Seed column of a report row: a concrete seed, or the per-(strategy, x)
/// mean over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SeedColumn {
    Value(u64),
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub strategy: String,
    pub x: f64,
    pub seed: SeedColumn,
    /// `None` marks a failed cell.
    pub error_pct: Option<f64>,
    pub wall_ms: u64,
}

/// Training-fit objective value at one sweep scale, emitted alongside the
/// scale-sweep error rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleObjectiveRecord {
    pub seed: u64,
    pub sigma: f64,
    pub objective: f64,
}

pub const REPORT_HEADER: &str = "experiment,strategy,x,seed,error_pct,wall_ms";

fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        a.experiment
            .cmp(&b.experiment)
            .then_with(|| a.strategy.cmp(&b.strategy))
            .then_with(|| a.x.total_cmp(&b.x))
            .then_with(|| a.seed.cmp(&b.seed))
    });
}

/// Writes rows as CSV in deterministic (strategy, x, seed) order.
pub fn emit_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for row in &sorted {
        let seed = match row.seed {
            SeedColumn::Value(s) => s.to_string(),
            SeedColumn::Mean => "mean".to_string(),
        };
        let error = row.error_pct.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            row.experiment, row.strategy, row.x, seed, error, row.wall_ms
        );
    }
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, message: String| HarnessError::Report {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_HEADER => {}
        Some((_, header)) => return Err(bad(1, format!("unexpected header {header:?}"))),
        None => return Err(bad(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(idx + 1, format!("{} fields, expected 6", fields.len())));
        }
        let x: f64 = fields[2]
            .parse()
            .map_err(|_| bad(idx + 1, format!("bad x {:?}", fields[2])))?;
        let seed = if fields[3] == "mean" {
            SeedColumn::Mean
        } else {
            SeedColumn::Value(
                fields[3]
                    .parse()
                    .map_err(|_| bad(idx + 1, format!("bad seed {:?}", fields[3])))?,
            )
        };
        let error_pct = if fields[4].is_empty() {
            None
        } else {
            Some(
                fields[4]
                    .parse()
                    .map_err(|_| bad(idx + 1, format!("bad error {:?}", fields[4])))?,
            )
        };
        let wall_ms: u64 = fields[5]
            .parse()
            .map_err(|_| bad(idx + 1, format!("bad wall time {:?}", fields[5])))?;
        rows.push(ReportRow {
            experiment: fields[0].to_string(),
            strategy: fields[1].to_string(),
            x,
            seed,
            error_pct,
            wall_ms,
        });
    }
    Ok(rows)
}

/// Writes the scale-sweep objective sidecar (`seed,sigma,objective`).
pub fn emit_scale_objectives(records: &[ScaleObjectiveRecord], path: &Path) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.sigma.total_cmp(&b.sigma)));
    let mut text = String::from("seed,sigma,objective\n");
    for r in &sorted {
        let _ = writeln!(text, "{},{},{}", r.seed, r.sigma, r.objective);
    }
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Ground-truth labels keyed by original row index, for scoring after
/// splits reorder everything.
fn truth_map(source: &Dataset) -> HashMap<usize, usize> {
    let mut map = HashMap::new();
    for i in 0..source.total_count() {
        if let Some(label) = source.label(i) {
            map.insert(source.original_index(i), label);
        }
    }
    map
}

/// Misclassification percentage of `pred` (one entry per unlabeled row of
/// `split`) against the ground truth; `None` when no unlabeled row has
/// known truth.
fn score(pred: &[usize], split: &Dataset, truth: &HashMap<usize, usize>) -> Option<f64> {
    let n = split.labeled_count();
    let mut total = 0usize;
    let mut wrong = 0usize;
    for i in n..split.total_count() {
        if let Some(&t) = truth.get(&split.original_index(i)) {
            total += 1;
            if pred[i - n] != t {
                wrong += 1;
            }
        }
    }
    (total > 0).then(|| 100.0 * wrong as f64 / total as f64)
}

struct EmbeddedSet {
    embedding: Embedding,
    neighbor_table: NeighborTable,
    kernel_scale: f64,
}

fn build_embedding(
    x: &DMatrix<f64>,
    labels: &[usize],
    cfg: &ExperimentConfig,
) -> std::result::Result<EmbeddedSet, String> {
    let neighbor_table = knn_neighbors(x, cfg.knn).map_err(|e| e.to_string())?;
    let kernel_scale = cfg
        .graph_sigma
        .unwrap_or_else(|| neighbor_table.median_distance());
    let graphs = ClassGraphs::build(x, labels, &neighbor_table, kernel_scale)
        .map_err(|e| e.to_string())?;
    let embedding = match cfg.method {
        EmbeddingMethod::SupervisedLaplacian { mu } => supervised_laplacian(&graphs, mu, cfg.dim),
        EmbeddingMethod::FisherNonlinear => fisher_nonlinear(&graphs, cfg.dim),
    }
    .map_err(|e| e.to_string())?;
    Ok(EmbeddedSet {
        embedding,
        neighbor_table,
        kernel_scale,
    })
}

/// Classifies `queries` against a reference set embedded by one strategy's
/// out-of-sample rule, returning labels with confidence margins.
///
/// The reference coordinates always go through the strategy's own map, so
/// the confidence formula sees the space the strategy actually produces.
fn classify_extended(
    strategy: Strategy,
    ref_x: &DMatrix<f64>,
    ref_labels: &[usize],
    embedded: &EmbeddedSet,
    queries: &DMatrix<f64>,
    cfg: &ExperimentConfig,
) -> std::result::Result<Vec<(usize, f64)>, String> {
    let emb = &embedded.embedding;
    match strategy {
        Strategy::RbfFit => {
            let labels: Vec<Option<usize>> = ref_labels.iter().map(|&l| Some(l)).collect();
            let ds = Dataset::from_parts(ref_x.clone(), labels).map_err(|e| e.to_string())?;
            let sosi_cfg = cfg.sosi_config(ds.labeled_count(), ds.total_count());
            let (f, _) =
                sosi::fit_training_interpolator(&ds, emb, &sosi_cfg).map_err(|e| e.to_string())?;
            nn_classify_confidence(&f, ref_x, ref_labels, queries).map_err(|e| e.to_string())
        }
        Strategy::Lle => {
            let refs = extend_lle(ref_x, emb.coords(), ref_x, cfg.lle_k).map_err(|e| e.to_string())?;
            let mapped =
                extend_lle(ref_x, emb.coords(), queries, cfg.lle_k).map_err(|e| e.to_string())?;
            Ok(classify_rows(&refs, ref_labels, &mapped))
        }
        Strategy::Nystrom => {
            let sigma = embedded.kernel_scale;
            let refs =
                extend_nystrom(ref_x, emb.coords(), ref_x, sigma).map_err(|e| e.to_string())?;
            let mapped =
                extend_nystrom(ref_x, emb.coords(), queries, sigma).map_err(|e| e.to_string())?;
            Ok(classify_rows(&refs, ref_labels, &mapped))
        }
        Strategy::KernelRidge => {
            let kr = KernelRidge::fit(
                ref_x.clone(),
                emb.coords(),
                embedded.kernel_scale,
                cfg.ridge_penalty,
            )
            .map_err(|e| e.to_string())?;
            let refs = kr.predict_rows(ref_x);
            let mapped = kr.predict_rows(queries);
            Ok(classify_rows(&refs, ref_labels, &mapped))
        }
        Strategy::NnAmbient => Ok(classify_nn_ambient(ref_x, ref_labels, queries)),
        Strategy::Sosi | Strategy::SslGf => {
            Err(format!("{} has no extension-map classifier", strategy.name()))
        }
    }
}

fn classify_rows(
    refs: &DMatrix<f64>,
    ref_labels: &[usize],
    mapped: &DMatrix<f64>,
) -> Vec<(usize, f64)> {
    (0..mapped.nrows())
        .map(|i| classify_in_embedding(refs, ref_labels, &mapped.row(i).transpose()))
        .collect()
}

/// One strategy's predicted labels for every unlabeled row of `split`,
/// with a confidence margin where the strategy defines one.
fn classify_split(
    strategy: Strategy,
    split: &Dataset,
    embedded: &EmbeddedSet,
    cfg: &ExperimentConfig,
) -> std::result::Result<Vec<(usize, Option<f64>)>, String> {
    let n = split.labeled_count();
    let q = split.total_count();
    let train_x = split.training_samples();
    let train_labels = split.training_labels();
    let unlabeled: DMatrix<f64> = split.samples().rows(n, q - n).into_owned();
    match strategy {
        Strategy::Sosi => {
            let sosi_cfg = cfg.sosi_config(n, q);
            let run = sosi::run(split, &embedded.embedding, &sosi_cfg).map_err(|e| e.to_string())?;
            Ok((n..q)
                .map(|i| (run.state.label(i), Some(run.state.score(i))))
                .collect())
        }
        Strategy::SslGf => {
            let labels =
                ssl_gaussian_fields(split.samples(), &train_labels, cfg.knn, embedded.kernel_scale)
                    .map_err(|e| e.to_string())?;
            Ok(labels.into_iter().map(|l| (l, None)).collect())
        }
        _ => classify_extended(strategy, &train_x, &train_labels, embedded, &unlabeled, cfg)
            .map(|pairs| pairs.into_iter().map(|(l, c)| (l, Some(c))).collect()),
    }
}

/// Classifies every unlabeled row of `split` with one strategy under the
/// embedding and graph settings in `cfg`. The protocol fields of `cfg`
/// (ratios, seeds) are ignored.
pub fn classify_dataset(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    split: &Dataset,
) -> Result<Vec<(usize, Option<f64>)>> {
    let embedded = build_embedding(&split.training_samples(), &split.training_labels(), cfg)
        .map_err(HarnessError::Cell)?;
    classify_split(strategy, split, &embedded, cfg).map_err(HarnessError::Cell)
}

fn failed_rows(
    experiment: &str,
    strategies: &[Strategy],
    x: f64,
    seed: u64,
) -> Vec<ReportRow> {
    strategies
        .iter()
        .map(|s| ReportRow {
            experiment: experiment.to_string(),
            strategy: s.name().to_string(),
            x,
            seed: SeedColumn::Value(seed),
            error_pct: None,
            wall_ms: 0,
        })
        .collect()
}

fn split_sweep_cell(cfg: &ExperimentConfig, ratio: f64, seed: u64) -> Vec<ReportRow> {
    const EXPERIMENT: &str = "split-sweep";
    let source = match cfg.dataset.build(seed) {
        Ok(s) => s,
        Err(_) => return failed_rows(EXPERIMENT, &cfg.strategies, ratio, seed),
    };
    let split = match split_labels(&source, ratio, seed) {
        Ok(s) => s,
        Err(_) => return failed_rows(EXPERIMENT, &cfg.strategies, ratio, seed),
    };
    let truth = truth_map(&source);
    let embedded = match build_embedding(
        &split.training_samples(),
        &split.training_labels(),
        cfg,
    ) {
        Ok(e) => e,
        Err(_) => return failed_rows(EXPERIMENT, &cfg.strategies, ratio, seed),
    };

    let mut rows = Vec::with_capacity(cfg.strategies.len());
    for &strategy in &cfg.strategies {
        let start = Instant::now();
        let pred = classify_split(strategy, &split, &embedded, cfg);
        let wall_ms = if cfg.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let error_pct = pred.ok().and_then(|p| {
            let labels: Vec<usize> = p.into_iter().map(|(l, _)| l).collect();
            score(&labels, &split, &truth)
        });
        rows.push(ReportRow {
            experiment: EXPERIMENT.to_string(),
            strategy: strategy.name().to_string(),
            x: ratio,
            seed: SeedColumn::Value(seed),
            error_pct,
            wall_ms,
        });
    }
    rows
}

/// Appends one mean row per (experiment, strategy, x) group, averaging over
/// seeds that produced an error value.
fn append_mean_rows(rows: &mut Vec<ReportRow>) {
    let mut groups: BTreeMap<(String, String, u64), Vec<(Option<f64>, u64)>> = BTreeMap::new();
    for row in rows.iter() {
        if row.seed == SeedColumn::Mean {
            continue;
        }
        groups
            .entry((
                row.experiment.clone(),
                row.strategy.clone(),
                row.x.to_bits(),
            ))
            .or_default()
            .push((row.error_pct, row.wall_ms));
    }
    for ((experiment, strategy, x_bits), cells) in groups {
        let successes: Vec<f64> = cells.iter().filter_map(|&(e, _)| e).collect();
        let error_pct = if successes.is_empty() {
            None
        } else {
            Some(successes.iter().sum::<f64>() / successes.len() as f64)
        };
        let wall_ms =
            cells.iter().map(|&(_, w)| w).sum::<u64>() / cells.len().max(1) as u64;
        rows.push(ReportRow {
            experiment,
            strategy,
            x: f64::from_bits(x_bits),
            seed: SeedColumn::Mean,
            error_pct,
            wall_ms,
        });
    }
}

fn run_cells<F>(count: usize, body: F) -> Vec<Vec<ReportRow>>
where
    F: Fn(usize) -> Vec<ReportRow> + Sync,
{
    let mut results: Vec<Vec<ReportRow>> = Vec::with_capacity(count);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..count)
            .map(|i| {
                let body = &body;
                scope.spawn(move || body(i))
            })
            .collect();
        for handle in handles {
            results.push(handle.join().expect("experiment cell panicked"));
        }
    });
    results
}

/// Labeled-ratio sweep: every (ratio, seed) cell runs every strategy once,
/// and each (strategy, ratio) additionally gets a mean row over seeds.
pub fn run_split_sweep(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let cells: Vec<(f64, u64)> = cfg
        .ratios
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results = run_cells(cells.len(), |i| {
        let (ratio, seed) = cells[i];
        split_sweep_cell(cfg, ratio, seed)
    });
    let mut rows: Vec<ReportRow> = results.into_iter().flatten().collect();
    append_mean_rows(&mut rows);
    sort_rows(&mut rows);
    Ok(rows)
}

/// Schedule prefix actually executed under the early-stop rule.
fn effective_schedule(schedule: &[usize], n: usize, q: usize, fraction: f64) -> Vec<usize> {
    let stop_at = n as f64 + fraction * (q - n) as f64;
    let mut out = Vec::new();
    for &l in schedule {
        out.push(l);
        if l > n && l as f64 >= stop_at {
            break;
        }
    }
    out
}

fn retrain_cell(cfg: &ExperimentConfig, ratio: f64, seed: u64) -> Vec<ReportRow> {
    const EXPERIMENT: &str = "retrain";
    let row = |strategy: Strategy, x: f64, error: Option<f64>, wall_ms: u64| ReportRow {
        experiment: EXPERIMENT.to_string(),
        strategy: strategy.name().to_string(),
        x,
        seed: SeedColumn::Value(seed),
        error_pct: error,
        wall_ms,
    };

    let prepared = cfg.dataset.build(seed).ok().and_then(|source| {
        let split = split_labels(&source, ratio, seed).ok()?;
        Some((source, split))
    });
    let Some((source, split)) = prepared else {
        // Without a split there is no schedule; emit one failed row per
        // strategy at the protocol origin.
        return cfg
            .strategies
            .iter()
            .map(|&s| row(s, 1.0, None, 0))
            .collect();
    };
    let truth = truth_map(&source);
    let n = split.labeled_count();
    let q = split.total_count();
    let schedule = effective_schedule(
        &equispaced_schedule(n, q, cfg.iterations),
        n,
        q,
        cfg.early_stop_fraction,
    );
    let xs: Vec<f64> = schedule.iter().map(|&l| l as f64 / n as f64).collect();

    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        let start = Instant::now();
        let errors = match strategy {
            Strategy::Sosi => retrain_sosi(cfg, &split, &truth, schedule.len()),
            Strategy::SslGf => vec![None; schedule.len()],
            _ => retrain_baseline(cfg, strategy, &split, &truth, &schedule),
        };
        let wall_ms = if cfg.timing {
            (start.elapsed().as_millis() as u64) / schedule.len().max(1) as u64
        } else {
            0
        };
        for (x, error) in xs.iter().zip(errors) {
            rows.push(row(strategy, *x, error, wall_ms));
        }
    }
    rows
}

fn retrain_sosi(
    cfg: &ExperimentConfig,
    split: &Dataset,
    truth: &HashMap<usize, usize>,
    iterations: usize,
) -> Vec<Option<f64>> {
    let n = split.labeled_count();
    let run = build_embedding(&split.training_samples(), &split.training_labels(), cfg)
        .map_err(|_| ())
        .and_then(|embedded| {
            let sosi_cfg = cfg.sosi_config(n, split.total_count());
            sosi::run(split, &embedded.embedding, &sosi_cfg).map_err(|_| ())
        });
    match run {
        Ok(run) => {
            let mut errors: Vec<Option<f64>> = run
                .trace
                .iter()
                .map(|record| score(&record.labels[n..], split, truth))
                .collect();
            errors.resize(iterations, None);
            errors
        }
        Err(()) => vec![None; iterations],
    }
}

fn retrain_baseline(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    split: &Dataset,
    truth: &HashMap<usize, usize>,
    schedule: &[usize],
) -> Vec<Option<f64>> {
    let n = split.labeled_count();
    let q = split.total_count();
    let mut errors: Vec<Option<f64>> = Vec::with_capacity(schedule.len());
    let fail_rest = |errors: &mut Vec<Option<f64>>| {
        while errors.len() < schedule.len() {
            errors.push(None);
        }
    };

    // Estimated label and confidence per unlabeled row; admitted rows keep
    // the label frozen at admission time.
    let mut estimates: Vec<(usize, f64)> = vec![(0, 0.0); q - n];
    let mut admitted: Vec<usize> = Vec::new();
    let mut admitted_mask = vec![false; q - n];

    for (it, &l_r) in schedule.iter().enumerate() {
        if it > 0 {
            let need = l_r - n - admitted.len();
            let mut candidates: Vec<usize> =
                (0..q - n).filter(|&i| !admitted_mask[i]).collect();
            candidates.sort_by(|&a, &b| {
                estimates[b]
                    .1
                    .total_cmp(&estimates[a].1)
                    .then(a.cmp(&b))
            });
            for &i in candidates.iter().take(need) {
                admitted.push(i);
                admitted_mask[i] = true;
            }
        }

        // Extended reference set: training rows plus admitted rows with
        // their frozen label estimates.
        let mut ref_x = DMatrix::zeros(l_r, split.dim());
        ref_x
            .rows_mut(0, n)
            .copy_from(&split.samples().rows(0, n));
        let mut ref_labels = split.training_labels();
        for (slot, &i) in admitted.iter().enumerate() {
            ref_x.set_row(n + slot, &split.samples().row(n + i));
            ref_labels.push(estimates[i].0);
        }

        let embedded = match build_embedding(&ref_x, &ref_labels, cfg) {
            Ok(e) => e,
            Err(_) => {
                fail_rest(&mut errors);
                break;
            }
        };

        let queries: Vec<usize> = (0..q - n).filter(|&i| !admitted_mask[i]).collect();
        if !queries.is_empty() {
            let mut query_x = DMatrix::zeros(queries.len(), split.dim());
            for (slot, &i) in queries.iter().enumerate() {
                query_x.set_row(slot, &split.samples().row(n + i));
            }
            match classify_extended(strategy, &ref_x, &ref_labels, &embedded, &query_x, cfg) {
                Ok(pairs) => {
                    for (&i, pair) in queries.iter().zip(pairs) {
                        estimates[i] = pair;
                    }
                }
                Err(_) => {
                    fail_rest(&mut errors);
                    break;
                }
            }
        }

        let pred: Vec<usize> = estimates.iter().map(|&(l, _)| l).collect();
        errors.push(score(&pred, split, truth));
    }
    fail_rest(&mut errors);
    errors
}

/// Iterative retraining comparison: the progressive algorithm runs
/// natively; each baseline re-embeds an extended training set from scratch
/// at every schedule step. Rows are indexed by the center-count ratio
/// `L_r / N`.
pub fn run_iterative_retraining(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    if cfg.ratios.len() != 1 {
        return Err(HarnessError::Config(
            "retraining uses exactly one labeled ratio".into(),
        ));
    }
    if cfg.strategies.contains(&Strategy::SslGf) {
        return Err(HarnessError::Config(
            "ssl-gf has no out-of-sample map, so it cannot join the retraining protocol".into(),
        ));
    }
    let ratio = cfg.ratios[0];
    let results = run_cells(cfg.seeds.len(), |i| retrain_cell(cfg, ratio, cfg.seeds[i]));
    let mut rows: Vec<ReportRow> = results.into_iter().flatten().collect();
    append_mean_rows(&mut rows);
    sort_rows(&mut rows);
    Ok(rows)
}

fn scale_sweep_cell(
    cfg: &ExperimentConfig,
    sweep: &[f64],
    ratio: f64,
    seed: u64,
) -> (Vec<ReportRow>, Vec<ScaleObjectiveRecord>) {
    const EXPERIMENT: &str = "scale-sweep";
    const STRATEGY: &str = "common-sigma";
    let failed = |x: f64| ReportRow {
        experiment: EXPERIMENT.to_string(),
        strategy: STRATEGY.to_string(),
        x,
        seed: SeedColumn::Value(seed),
        error_pct: None,
        wall_ms: 0,
    };

    let prepared = (|| {
        let source = cfg.dataset.build(seed).ok()?;
        let split = split_labels(&source, ratio, seed).ok()?;
        let truth = truth_map(&source);
        let train_x = split.training_samples();
        let train_labels = split.training_labels();
        let embedded = build_embedding(&train_x, &train_labels, cfg).ok()?;
        let pairs = separable_pairs(&embedded.embedding, &train_labels).ok()?;
        Some((split, truth, train_x, train_labels, embedded, pairs))
    })();
    let Some((split, truth, train_x, train_labels, embedded, pairs)) = prepared else {
        return (sweep.iter().map(|&s| failed(s)).collect(), Vec::new());
    };

    let n = split.labeled_count();
    let q = split.total_count();
    let unlabeled: DMatrix<f64> = split.samples().rows(n, q - n).into_owned();
    let emb = &embedded.embedding;

    let mut rows = Vec::with_capacity(sweep.len());
    let mut records = Vec::new();
    for &sigma in sweep {
        let start = Instant::now();
        let fit = RbfInterpolator::fit(
            train_x.clone(),
            emb.coords(),
            vec![sigma; emb.dim()],
        );
        let (error_pct, objective) = match fit {
            Ok(f) => {
                let error = nn_classify_confidence(&f, &train_x, &train_labels, &unlabeled)
                    .ok()
                    .map(|pairs| pairs.into_iter().map(|(l, _)| l).collect::<Vec<_>>())
                    .and_then(|pred| score(&pred, &split, &truth));
                let objective = regularization_terms(
                    &f,
                    &train_x,
                    &train_labels,
                    &embedded.neighbor_table,
                    &pairs,
                    cfg.lambda,
                )
                .ok()
                .map(|report| report.total());
                (error, objective)
            }
            Err(_) => (None, None),
        };
        let wall_ms = if cfg.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        rows.push(ReportRow {
            experiment: EXPERIMENT.to_string(),
            strategy: STRATEGY.to_string(),
            x: sigma,
            seed: SeedColumn::Value(seed),
            error_pct,
            wall_ms,
        });
        if let Some(objective) = objective {
            records.push(ScaleObjectiveRecord {
                seed,
                sigma,
                objective,
            });
        }
    }
    (rows, records)
}

/// Common-scale sweep: fits one interpolator per scale on the training set,
/// recording the unlabeled error and the training-fit objective.
pub fn run_scale_sweep(
    cfg: &ExperimentConfig,
) -> Result<(Vec<ReportRow>, Vec<ScaleObjectiveRecord>)> {
    cfg.validate()?;
    let sweep = cfg.sigma_sweep.clone().ok_or_else(|| {
        HarnessError::Config("scale sweep needs a sigma_sweep grid".into())
    })?;
    if sweep.is_empty() {
        return Err(HarnessError::Config("sigma_sweep grid is empty".into()));
    }
    if cfg.ratios.len() != 1 {
        return Err(HarnessError::Config(
            "scale sweep uses exactly one labeled ratio".into(),
        ));
    }
    let ratio = cfg.ratios[0];

    let mut outputs: Vec<(Vec<ReportRow>, Vec<ScaleObjectiveRecord>)> =
        Vec::with_capacity(cfg.seeds.len());
    let sweep_ref = &sweep;
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || scale_sweep_cell(cfg, sweep_ref, ratio, seed)))
            .collect();
        for handle in handles {
            outputs.push(handle.join().expect("experiment cell panicked"));
        }
    });

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (mut cell_rows, mut cell_records) in outputs {
        rows.append(&mut cell_rows);
        records.append(&mut cell_records);
    }
    append_mean_rows(&mut rows);
    sort_rows(&mut rows);
    records.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.sigma.total_cmp(&b.sigma)));
    Ok((rows, records))
}

// ---------------------------------------------------------------------------
// Config file parsing
// ---------------------------------------------------------------------------

struct RawConfig {
    entries: HashMap<String, String>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    idx + 1
                )));
            };
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            if entries
                .insert(full.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(HarnessError::Config(format!("duplicate key {full}")));
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parse_value<T: std::str::FromStr>(&mut self, key: &str, default: &str) -> Result<T> {
        let raw = self.take(key).unwrap_or_else(|| default.to_string());
        raw.parse().map_err(|_| {
            HarnessError::Config(format!("bad value {raw:?} for {key}"))
        })
    }

    fn finish(self) -> Result<()> {
        let mut leftover: Vec<String> = self.entries.into_keys().collect();
        if leftover.is_empty() {
            return Ok(());
        }
        leftover.sort();
        Err(HarnessError::Config(format!(
            "unknown keys: {}",
            leftover.join(", ")
        )))
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| HarnessError::Config(format!("bad value {s:?} in {key}")))
        })
        .collect()
}

/// Parses `lo:hi:count` into a log-spaced grid.
fn parse_grid(raw: &str, key: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(HarnessError::Config(format!(
            "{key} must be lo:hi:count, got {raw:?}"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad {key} low bound {:?}", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad {key} high bound {:?}", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad {key} count {:?}", parts[2])))?;
    if !(lo > 0.0 && hi >= lo) || count < 2 {
        return Err(HarnessError::Config(format!(
            "{key} needs 0 < lo <= hi and count >= 2"
        )));
    }
    Ok(log_spaced_grid(lo, hi, count))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text)?;

    let dataset = match raw.take("dataset.kind").as_deref() {
        Some("synthetic") | None => DatasetSpec::Synthetic {
            classes: raw.parse_value("dataset.classes", "2")?,
            per_class: raw.parse_value("dataset.per_class", "30")?,
            noise: raw.parse_value("dataset.noise", "0.05")?,
        },
        Some("csv") => {
            let features = raw
                .take("dataset.features")
                .ok_or_else(|| HarnessError::Config("csv dataset needs dataset.features".into()))?;
            let labels = raw
                .take("dataset.labels")
                .ok_or_else(|| HarnessError::Config("csv dataset needs dataset.labels".into()))?;
            DatasetSpec::Csv {
                features: PathBuf::from(features),
                labels: PathBuf::from(labels),
                header: raw.parse_value("dataset.header", "false")?,
            }
        }
        Some("images") => {
            let root = raw
                .take("dataset.root")
                .ok_or_else(|| HarnessError::Config("image dataset needs dataset.root".into()))?;
            let resize = raw
                .take("dataset.resize")
                .ok_or_else(|| HarnessError::Config("image dataset needs dataset.resize".into()))?;
            let (w, h) = resize.split_once('x').ok_or_else(|| {
                HarnessError::Config(format!("dataset.resize must be WxH, got {resize:?}"))
            })?;
            let width = w.parse().map_err(|_| {
                HarnessError::Config(format!("bad resize width {w:?}"))
            })?;
            let height = h.parse().map_err(|_| {
                HarnessError::Config(format!("bad resize height {h:?}"))
            })?;
            DatasetSpec::ImageDirs {
                root: PathBuf::from(root),
                resize: (width, height),
            }
        }
        Some(other) => {
            return Err(HarnessError::Config(format!(
                "unknown dataset kind {other:?}"
            )))
        }
    };

    // `mu` only matters for the within/between tradeoff method, but it is a
    // recognized key either way.
    let mu: f64 = raw.parse_value("embedding.mu", "1.0")?;
    let method = match raw
        .take("embedding.method")
        .unwrap_or_else(|| "sup-laplacian".into())
        .as_str()
    {
        "sup-laplacian" => EmbeddingMethod::SupervisedLaplacian { mu },
        "fisher" => EmbeddingMethod::FisherNonlinear,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown embedding method {other:?}"
            )))
        }
    };
    let dim = raw.parse_value("embedding.dim", "2")?;

    let knn = raw.parse_value("graph.knn", "7")?;
    let graph_sigma = match raw.take("graph.sigma").as_deref() {
        None | Some("auto") => None,
        Some(value) => Some(value.parse().map_err(|_| {
            HarnessError::Config(format!("bad value {value:?} for graph.sigma"))
        })?),
    };

    let iterations = raw.parse_value("sosi.iterations", "5")?;
    let lambda = raw.parse_value("sosi.lambda", "1.0")?;
    let k_proj = raw.parse_value("sosi.kproj", "5")?;
    let early_stop_fraction = raw.parse_value("sosi.early_stop", "1.0")?;
    let reoptimize_scales = raw.parse_value("sosi.reoptimize_scales", "false")?;
    let scale_selection = match raw.take("sosi.scale_selection").as_deref() {
        None => match method {
            EmbeddingMethod::SupervisedLaplacian { .. } => ScaleSelection::MinimizeObjective,
            EmbeddingMethod::FisherNonlinear => {
                ScaleSelection::LargestAboveRatio { threshold: 0.5 }
            }
        },
        Some("minimize") => ScaleSelection::MinimizeObjective,
        Some(other) => match other.strip_prefix("ratio:") {
            Some(t) => ScaleSelection::LargestAboveRatio {
                threshold: t.parse().map_err(|_| {
                    HarnessError::Config(format!("bad ratio threshold {t:?}"))
                })?,
            },
            None => {
                return Err(HarnessError::Config(format!(
                    "scale_selection must be `minimize` or `ratio:<t>`, got {other:?}"
                )))
            }
        },
    };
    let sigma_grid = match raw.take("sosi.sigma_grid").as_deref() {
        None | Some("auto") => None,
        Some(spec) => Some(parse_grid(spec, "sosi.sigma_grid")?),
    };

    let lle_k = raw.parse_value("baselines.lle_k", "5")?;
    let ridge_penalty = raw.parse_value("baselines.ridge_penalty", "0.001")?;

    let strategies_raw = raw
        .take("experiment.strategies")
        .ok_or_else(|| HarnessError::Config("experiment.strategies is required".into()))?;
    let mut strategies = Vec::new();
    for token in strategies_raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let strategy = Strategy::parse(token).ok_or_else(|| {
            HarnessError::Config(format!("unknown strategy {token:?}"))
        })?;
        if !strategies.contains(&strategy) {
            strategies.push(strategy);
        }
    }

    let ratios_raw = raw
        .take("experiment.ratios")
        .ok_or_else(|| HarnessError::Config("experiment.ratios is required".into()))?;
    let ratios = parse_list(&ratios_raw, "experiment.ratios")?;
    let seeds_raw = raw
        .take("experiment.seeds")
        .ok_or_else(|| HarnessError::Config("experiment.seeds is required".into()))?;
    let seeds = parse_list(&seeds_raw, "experiment.seeds")?;

    let sigma_sweep = match raw.take("experiment.sigma_sweep") {
        None => None,
        Some(spec) => Some(parse_grid(&spec, "experiment.sigma_sweep")?),
    };
    let timing = match raw
        .take("experiment.timing")
        .unwrap_or_else(|| "on".into())
        .as_str()
    {
        "on" => true,
        "off" => false,
        other => {
            return Err(HarnessError::Config(format!(
                "experiment.timing must be on or off, got {other:?}"
            )))
        }
    };
    let out = raw.take("experiment.out").map(PathBuf::from);

    raw.finish()?;

    let cfg = ExperimentConfig {
        dataset,
        method,
        dim,
        knn,
        graph_sigma,
        strategies,
        ratios,
        seeds,
        iterations,
        lambda,
        k_proj,
        early_stop_fraction,
        reoptimize_scales,
        scale_selection,
        sigma_grid,
        lle_k,
        ridge_penalty,
        sigma_sweep,
        timing,
        out,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
