//! Command line front end: embeddings, progressive classification,
//! reference strategies, and the experiment protocols.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use sosi_core::dataset::{
    load_image_dirs, load_matrix_csv, split_labels, synthetic_curves, Dataset,
};
use sosi_core::embedding::{fisher_nonlinear, supervised_laplacian, Embedding, EmbeddingMethod};
use sosi_core::graph::{knn_neighbors, ClassGraphs, NeighborTable};
use sosi_core::harness::{
    classify_dataset, emit_report, emit_scale_objectives, read_config, run_iterative_retraining,
    run_scale_sweep, run_split_sweep, ReportRow, SeedColumn, Strategy,
};
use sosi_core::harness::{DatasetSpec, ExperimentConfig};
use sosi_core::rbf::{log_spaced_grid, ScaleSelection};
use sosi_core::sosi::{equispaced_schedule, SosiConfig};

#[derive(Parser)]
#[command(
    name = "sosi",
    version,
    about = "Class-aware embeddings with progressive out-of-sample interpolation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed the labeled samples and write coordinates plus a sidecar
    Embed(EmbedCmd),
    /// Run the progressive interpolation classifier over the unlabeled rows
    Sosi(SosiCmd),
    /// Classify unlabeled rows with a single reference strategy
    Baseline(BaselineCmd),
    /// Run an experiment protocol described by a config file
    Experiment(ExperimentCmd),
}

/// Image size parsed from `WxH`.
#[derive(Debug, Clone, Copy)]
struct Resize(u32, u32);

impl FromStr for Resize {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (w, h) = s
            .split_once('x')
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let w = w.parse().map_err(|_| format!("bad width {w:?}"))?;
        let h = h.parse().map_err(|_| format!("bad height {h:?}"))?;
        Ok(Resize(w, h))
    }
}

#[derive(Args)]
struct DataArgs {
    /// CSV file of feature rows
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Label file aligned with --features; empty lines mark unlabeled rows
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
    /// Skip a header line in --features and --labels
    #[arg(long)]
    header: bool,
    /// Directory with one subdirectory of images per class
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Image size for --data-root, as WxH
    #[arg(long, default_value = "16x16")]
    resize: Resize,
    /// Synthetic curve dataset, as classes:per_class:noise
    #[arg(long, value_name = "C:P:NOISE")]
    synthetic: Option<String>,
    /// Keep this fraction of each class labeled and hide the rest
    #[arg(long, value_name = "R")]
    labeled_ratio: Option<f64>,
    /// Seed for synthetic draws and the labeled split
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A dataset ready to classify, and the fully labeled source when the
/// split hid labels (so predictions can be scored).
struct LoadedData {
    data: Dataset,
    source: Option<Dataset>,
}

impl DataArgs {
    fn load(&self) -> Result<LoadedData> {
        let base = if let Some(spec) = &self.synthetic {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                bail!("--synthetic takes classes:per_class:noise, got {spec:?}");
            }
            let classes: usize = parts[0].parse().context("bad class count")?;
            let per_class: usize = parts[1].parse().context("bad per-class count")?;
            let noise: f64 = parts[2].parse().context("bad noise level")?;
            synthetic_curves(classes, per_class, noise, self.seed)?
        } else if let Some(features) = &self.features {
            let labels = self
                .labels
                .as_ref()
                .context("--features requires --labels")?;
            load_matrix_csv(features, labels, self.header)?
        } else if let Some(root) = &self.data_root {
            load_image_dirs(root, (self.resize.0, self.resize.1))?
        } else {
            bail!("choose a data source: --features/--labels, --data-root, or --synthetic");
        };
        match self.labeled_ratio {
            Some(ratio) => Ok(LoadedData {
                data: split_labels(&base, ratio, self.seed)?,
                source: Some(base),
            }),
            None => Ok(LoadedData {
                data: base,
                source: None,
            }),
        }
    }
}

#[derive(Args)]
struct GraphArgs {
    /// Neighbors per point for graph construction
    #[arg(long, default_value_t = 7)]
    knn: usize,
    /// Kernel scale for graph weights: a number, or `auto` for the median
    /// nearest-neighbor distance
    #[arg(long, default_value = "auto")]
    graph_sigma: String,
}

impl GraphArgs {
    fn sigma(&self) -> Result<Option<f64>> {
        if self.graph_sigma == "auto" {
            Ok(None)
        } else {
            let v: f64 = self
                .graph_sigma
                .parse()
                .with_context(|| format!("bad --graph-sigma {:?}", self.graph_sigma))?;
            Ok(Some(v))
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    /// Embedding method: sup-laplacian or fisher
    #[arg(long = "embed-method", default_value = "sup-laplacian")]
    embed_method: String,
    /// Embedding dimension
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Between-class repulsion weight for sup-laplacian
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
}

impl EmbedArgs {
    fn method(&self) -> Result<EmbeddingMethod> {
        parse_method(&self.embed_method, self.mu)
    }
}

fn parse_method(name: &str, mu: f64) -> Result<EmbeddingMethod> {
    match name {
        "sup-laplacian" => Ok(EmbeddingMethod::SupervisedLaplacian { mu }),
        "fisher" => Ok(EmbeddingMethod::FisherNonlinear),
        other => bail!("unknown embedding method {other:?}"),
    }
}

#[derive(Args)]
struct ScaleArgs {
    /// Weight of the separation term in the scale objective
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Kernel-scale search grid, as lo:hi:count (log spaced); default derives
    /// from the data
    #[arg(long, value_name = "LO:HI:N")]
    sigma_grid: Option<String>,
    /// Pick the largest scale keeping the fit ratio above this threshold
    /// instead of minimizing the objective
    #[arg(long, value_name = "T")]
    fisher_threshold: Option<f64>,
}

impl ScaleArgs {
    fn grid(&self) -> Result<Option<Vec<f64>>> {
        match &self.sigma_grid {
            None => Ok(None),
            Some(spec) => Ok(Some(parse_grid(spec)?)),
        }
    }

    fn selection(&self, method: EmbeddingMethod) -> ScaleSelection {
        match self.fisher_threshold {
            Some(threshold) => ScaleSelection::LargestAboveRatio { threshold },
            None => match method {
                EmbeddingMethod::SupervisedLaplacian { .. } => ScaleSelection::MinimizeObjective,
                EmbeddingMethod::FisherNonlinear => {
                    ScaleSelection::LargestAboveRatio { threshold: 0.5 }
                }
            },
        }
    }
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be lo:hi:count, got {spec:?}");
    }
    let lo: f64 = parts[0].parse().context("bad grid low bound")?;
    let hi: f64 = parts[1].parse().context("bad grid high bound")?;
    let count: usize = parts[2].parse().context("bad grid count")?;
    let grid = log_spaced_grid(lo, hi, count);
    if grid.is_empty() {
        bail!("grid needs 0 < lo <= hi and count >= 1");
    }
    Ok(grid)
}

#[derive(Args)]
struct EmbedCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    graph: GraphArgs,
    /// Embedding method: sup-laplacian or fisher
    #[arg(long, default_value = "sup-laplacian")]
    method: String,
    /// Embedding dimension
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Between-class repulsion weight for sup-laplacian
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Output CSV of embedded coordinates, one row per training sample
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Sidecar path; defaults to the output with extension meta.json
    #[arg(long, value_name = "FILE")]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct SosiCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    scale: ScaleArgs,
    /// Center schedule, as start:end:steps; default grows from the training
    /// count to the full set in 5 steps
    #[arg(long, value_name = "N:Q:R")]
    schedule: Option<String>,
    /// Stop after the first iteration reaching this fraction of admissions
    #[arg(long, default_value_t = 1.0)]
    early_stop: f64,
    /// Neighbors used when projecting an admitted point onto its class
    #[arg(long, default_value_t = 5)]
    kproj: usize,
    /// Re-run scale selection whenever the center set grows
    #[arg(long)]
    reoptimize_scales: bool,
    /// Write the per-iteration label trace as CSV
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Write the final interpolator in the binary model format
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Write final labels for the unlabeled rows as CSV
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    scale: ScaleArgs,
    /// Strategy: rbf-fit, lle, nystrom, nn, ssl-gf, or kridge
    #[arg(long)]
    method: String,
    /// Neighbors for the locally linear extension
    #[arg(long, default_value_t = 5)]
    lle_k: usize,
    /// Ridge penalty for kridge
    #[arg(long, default_value_t = 1e-3)]
    ridge_penalty: f64,
    /// Write predictions for the unlabeled rows as CSV
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentCmd {
    /// Protocol: split-sweep, retrain, or scale-sweep
    protocol: String,
    /// Experiment config file
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Report path; overrides the config's `experiment.out`
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Embed(cmd) => run_embed(cmd).map(|()| 0),
        Command::Sosi(cmd) => run_sosi(cmd).map(|()| 0),
        Command::Baseline(cmd) => run_baseline(cmd).map(|()| 0),
        Command::Experiment(cmd) => run_experiment(cmd),
    }
}

fn build_embedding(
    train_x: &DMatrix<f64>,
    train_labels: &[usize],
    graph: &GraphArgs,
    method: EmbeddingMethod,
    dim: usize,
) -> Result<(Embedding, NeighborTable, f64)> {
    let nbrs = knn_neighbors(train_x, graph.knn)?;
    let sigma = graph.sigma()?.unwrap_or_else(|| nbrs.median_distance());
    let graphs = ClassGraphs::build(train_x, train_labels, &nbrs, sigma)?;
    let embedding = match method {
        EmbeddingMethod::SupervisedLaplacian { mu } => supervised_laplacian(&graphs, mu, dim),
        EmbeddingMethod::FisherNonlinear => fisher_nonlinear(&graphs, dim),
    }?;
    Ok((embedding, nbrs, sigma))
}

fn run_embed(cmd: EmbedCmd) -> Result<()> {
    let loaded = cmd.data.load()?;
    let ds = &loaded.data;
    let train_x = ds.training_samples();
    let train_labels = ds.training_labels();
    let (embedding, _, _) = build_embedding(
        &train_x,
        &train_labels,
        &cmd.graph,
        parse_method(&cmd.method, cmd.mu)?,
        cmd.dim,
    )?;
    let sidecar = cmd
        .sidecar
        .clone()
        .unwrap_or_else(|| cmd.out.with_extension("meta.json"));
    embedding.save(&cmd.out, &sidecar)?;
    println!(
        "embedded {} samples into {} dimensions -> {} (sidecar {})",
        embedding.len(),
        embedding.dim(),
        cmd.out.display(),
        sidecar.display()
    );
    Ok(())
}

/// Percentage of unlabeled rows whose prediction disagrees with the hidden
/// truth, when a split made the truth available.
fn hidden_error(
    pred: &[usize],
    split: &Dataset,
    source: Option<&Dataset>,
) -> Option<f64> {
    let source = source?;
    let truth: std::collections::HashMap<usize, usize> = (0..source.total_count())
        .filter_map(|i| source.label(i).map(|l| (source.original_index(i), l)))
        .collect();
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

fn format_confidence(c: f64) -> String {
    if c.is_infinite() {
        "inf".to_string()
    } else {
        format!("{c}")
    }
}

fn write_predictions(
    path: &Path,
    split: &Dataset,
    pairs: &[(usize, Option<f64>)],
) -> Result<()> {
    let n = split.labeled_count();
    let mut text = String::from("point,label,confidence\n");
    for (j, (label, confidence)) in pairs.iter().enumerate() {
        let conf = confidence.map(format_confidence).unwrap_or_default();
        let _ = writeln!(text, "{},{},{}", split.original_index(n + j), label, conf);
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_schedule(spec: &str, n: usize, q: usize) -> Result<Vec<usize>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("--schedule takes start:end:steps, got {spec:?}");
    }
    let start: usize = parts[0].parse().context("bad schedule start")?;
    let end: usize = parts[1].parse().context("bad schedule end")?;
    let steps: usize = parts[2].parse().context("bad schedule steps")?;
    if start != n {
        bail!("schedule starts at {start} but the dataset has {n} labeled samples");
    }
    if end > q {
        bail!("schedule ends at {end} but the dataset has only {q} samples");
    }
    Ok(equispaced_schedule(start, end, steps))
}

fn run_sosi(cmd: SosiCmd) -> Result<()> {
    let loaded = cmd.data.load()?;
    let split = &loaded.data;
    let n = split.labeled_count();
    let q = split.total_count();
    if n == q {
        bail!("every sample is labeled; nothing to classify");
    }
    let method = cmd.embed.method()?;
    let train_x = split.training_samples();
    let train_labels = split.training_labels();
    let (embedding, _, _) =
        build_embedding(&train_x, &train_labels, &cmd.graph, method, cmd.embed.dim)?;

    let schedule = match &cmd.schedule {
        Some(spec) => parse_schedule(spec, n, q)?,
        None => equispaced_schedule(n, q, 5),
    };
    let config = SosiConfig {
        schedule,
        lambda: cmd.scale.lambda,
        k_proj: cmd.kproj,
        early_stop_fraction: cmd.early_stop,
        reoptimize_scales: cmd.reoptimize_scales,
        knn: cmd.graph.knn,
        scale_selection: cmd.scale.selection(method),
        sigma_grid: cmd.scale.grid()?,
    };
    let run = sosi_core::sosi::run(split, &embedding, &config)?;

    if let Some(path) = &cmd.trace {
        let mut text = String::from("iteration,point,label,confidence\n");
        for (it, record) in run.trace.iter().enumerate() {
            for i in n..q {
                let _ = writeln!(
                    text,
                    "{},{},{},{}",
                    it + 1,
                    split.original_index(i),
                    record.labels[i],
                    format_confidence(record.scores[i])
                );
            }
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &cmd.model {
        run.interpolator.save(path)?;
    }
    let pairs: Vec<(usize, Option<f64>)> = (n..q)
        .map(|i| (run.state.label(i), Some(run.state.score(i))))
        .collect();
    if let Some(path) = &cmd.out {
        write_predictions(path, split, &pairs)?;
    }

    let final_centers = run
        .trace
        .last()
        .map(|record| record.center_rows.len())
        .unwrap_or(n);
    print!(
        "iterations={} centers={} unlabeled={}",
        run.trace.len(),
        final_centers,
        q - n
    );
    let labels: Vec<usize> = pairs.iter().map(|&(l, _)| l).collect();
    match hidden_error(&labels, split, loaded.source.as_ref()) {
        Some(err) => println!(" error_pct={err:.2}"),
        None => println!(),
    }
    Ok(())
}

fn run_baseline(cmd: BaselineCmd) -> Result<()> {
    let strategy = Strategy::parse(&cmd.method)
        .with_context(|| format!("unknown strategy {:?}", cmd.method))?;
    if strategy == Strategy::Sosi {
        bail!("use the `sosi` subcommand for the progressive classifier");
    }
    let loaded = cmd.data.load()?;
    let split = &loaded.data;
    if split.labeled_count() == split.total_count() {
        bail!("every sample is labeled; nothing to classify");
    }
    let method = cmd.embed.method()?;
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            classes: 2,
            per_class: 1,
            noise: 0.0,
        },
        method,
        dim: cmd.embed.dim,
        knn: cmd.graph.knn,
        graph_sigma: cmd.graph.sigma()?,
        strategies: vec![strategy],
        ratios: vec![0.5],
        seeds: vec![0],
        iterations: 5,
        lambda: cmd.scale.lambda,
        k_proj: 5,
        early_stop_fraction: 1.0,
        reoptimize_scales: false,
        scale_selection: cmd.scale.selection(method),
        sigma_grid: cmd.scale.grid()?,
        lle_k: cmd.lle_k,
        ridge_penalty: cmd.ridge_penalty,
        sigma_sweep: None,
        timing: false,
        out: None,
    };
    let pairs = classify_dataset(&cfg, strategy, split)?;
    if let Some(path) = &cmd.out {
        write_predictions(path, split, &pairs)?;
    }
    let labels: Vec<usize> = pairs.iter().map(|&(l, _)| l).collect();
    print!("strategy={} classified={}", strategy.name(), labels.len());
    match hidden_error(&labels, split, loaded.source.as_ref()) {
        Some(err) => println!(" error_pct={err:.2}"),
        None => println!(),
    }
    Ok(())
}

fn count_failed(rows: &[ReportRow]) -> (usize, usize) {
    let cells: Vec<&ReportRow> = rows
        .iter()
        .filter(|r| r.seed != SeedColumn::Mean)
        .collect();
    let failed = cells.iter().filter(|r| r.error_pct.is_none()).count();
    (cells.len(), failed)
}

fn run_experiment(cmd: ExperimentCmd) -> Result<i32> {
    let cfg = read_config(&cmd.config)?;
    let out = cmd
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .context("no output path: pass --out or set experiment.out in the config")?;

    let rows = match cmd.protocol.as_str() {
        "split-sweep" => run_split_sweep(&cfg)?,
        "retrain" => run_iterative_retraining(&cfg)?,
        "scale-sweep" => {
            let (rows, records) = run_scale_sweep(&cfg)?;
            let sidecar = PathBuf::from(format!("{}.rhat.csv", out.display()));
            emit_scale_objectives(&records, &sidecar)?;
            rows
        }
        other => bail!("unknown protocol {other:?}; use split-sweep, retrain, or scale-sweep"),
    };

    emit_report(&rows, &out)?;
    let (cells, failed) = count_failed(&rows);
    println!(
        "{}: {} cells, {} failed -> {}",
        cmd.protocol,
        cells,
        failed,
        out.display()
    );
    Ok(if failed == 0 { 0 } else { 1 })
}
