//! Sample ingestion: image directories, numeric CSV, synthetic curves, and
//! stratified label splits.
//!
//! A [`Dataset`] always stores the labeled rows first. Class ids are 1-based
//! and contiguous: every class in `1..=class_count` has at least one labeled
//! sample.

use std::collections::HashSet;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no class subdirectories under {0}")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no images")]
    EmptyClassDir(PathBuf),
    #[error("parse error in {path} at row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("label {label} at row {row} is out of range (class ids start at 1)")]
    LabelOutOfRange { row: usize, label: i64 },
    #[error("class {0} has no labeled sample")]
    MissingClass(usize),
    #[error("rows {0} and {1} are bitwise identical")]
    DuplicateRows(usize, usize),
    #[error("labeled rows must come first: row {0} is labeled but follows an unlabeled row")]
    LabeledAfterUnlabeled(usize),
    #[error("no labeled samples")]
    NoLabeledSamples,
    #[error("label split at ratio {ratio} leaves class {class} without labeled samples")]
    EmptySplit { class: usize, ratio: f64 },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Samples with a labeled prefix.
///
/// `samples` is Q x n with one sample per row. The first `labeled_count`
/// rows carry labels in `1..=class_count`; the remaining rows are unlabeled.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: DMatrix<f64>,
    labels: Vec<Option<usize>>,
    labeled_count: usize,
    class_count: usize,
    original_indices: Vec<usize>,
}

impl Dataset {
    /// Validates and assembles a dataset whose labeled rows already come first.
    pub fn from_parts(samples: DMatrix<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        let q = samples.nrows();
        Self::with_original_indices(samples, labels, (0..q).collect())
    }

    fn with_original_indices(
        samples: DMatrix<f64>,
        labels: Vec<Option<usize>>,
        original_indices: Vec<usize>,
    ) -> Result<Self> {
        let q = samples.nrows();
        if q == 0 || samples.ncols() == 0 {
            return Err(DatasetError::InvalidArg("empty sample matrix".into()));
        }
        if labels.len() != q {
            return Err(DatasetError::InvalidArg(format!(
                "{} labels for {} rows",
                labels.len(),
                q
            )));
        }
        debug_assert_eq!(original_indices.len(), q);

        let mut labeled_count = 0;
        let mut seen_unlabeled = false;
        for (i, label) in labels.iter().enumerate() {
            match label {
                Some(_) if seen_unlabeled => {
                    return Err(DatasetError::LabeledAfterUnlabeled(i));
                }
                Some(_) => labeled_count += 1,
                None => seen_unlabeled = true,
            }
        }
        if labeled_count == 0 {
            return Err(DatasetError::NoLabeledSamples);
        }

        let class_count = labels.iter().flatten().copied().max().unwrap_or(0);
        let mut present = vec![false; class_count + 1];
        for (i, label) in labels.iter().enumerate() {
            if let Some(c) = label {
                if *c == 0 {
                    return Err(DatasetError::LabelOutOfRange {
                        row: i + 1,
                        label: 0,
                    });
                }
                present[*c] = true;
            }
        }
        for c in 1..=class_count {
            if !present[c] {
                return Err(DatasetError::MissingClass(c));
            }
        }

        let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(q);
        let mut first_at: Vec<usize> = Vec::with_capacity(q);
        for i in 0..q {
            let key: Vec<u64> = samples.row(i).iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key.clone()) {
                let j = first_at
                    .iter()
                    .position(|&p| {
                        samples
                            .row(p)
                            .iter()
                            .zip(samples.row(i).iter())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                    })
                    .map(|p| first_at[p])
                    .unwrap_or(0);
                return Err(DatasetError::DuplicateRows(j, i));
            }
            first_at.push(i);
        }

        Ok(Self {
            samples,
            labels,
            labeled_count,
            class_count,
            original_indices,
        })
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.samples.row(i).transpose()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// N: number of labeled rows (they form the prefix).
    pub fn labeled_count(&self) -> usize {
        self.labeled_count
    }

    /// Q: total number of rows.
    pub fn total_count(&self) -> usize {
        self.samples.nrows()
    }

    /// M: number of classes.
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// n: ambient dimension.
    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Row index this sample had in the dataset it was derived from.
    pub fn original_index(&self, i: usize) -> usize {
        self.original_indices[i]
    }

    /// The labeled prefix as an N x n matrix.
    pub fn training_samples(&self) -> DMatrix<f64> {
        self.samples.rows(0, self.labeled_count).into_owned()
    }

    /// Labels of the labeled prefix.
    pub fn training_labels(&self) -> Vec<usize> {
        self.labels[..self.labeled_count]
            .iter()
            .map(|l| l.expect("labeled prefix"))
            .collect()
    }
}

/// Loads `root/<class>/<image>` trees. Class ids follow the sorted
/// subdirectory names; files within a class are read in sorted order.
///
/// Every image is grayscale-converted with luminance weights
/// (0.299, 0.587, 0.114), resized to `resize = (width, height)` by bilinear
/// interpolation, normalized to `[0, 1]`, and flattened row-major.
pub fn load_image_dirs(root: &Path, resize: (u32, u32)) -> Result<Dataset> {
    let (width, height) = resize;
    if width == 0 || height == 0 {
        return Err(DatasetError::InvalidArg("resize dimensions must be positive".into()));
    }

    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| DatasetError::Io {
            path: root.to_path_buf(),
            source: e,
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DatasetError::NoClasses(root.to_path_buf()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| DatasetError::Io {
                path: dir.clone(),
                source: e,
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DatasetError::EmptyClassDir(dir.clone()));
        }
        for file in files {
            rows.push(load_image_row(&file, width, height)?);
            labels.push(Some(class_idx + 1));
        }
    }

    let n = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let samples = DMatrix::from_row_slice(flat.len() / n, n, &flat);
    Dataset::from_parts(samples, labels)
}

fn load_image_row(path: &Path, width: u32, height: u32) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| DatasetError::ImageDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb32f();
    let mut gray: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::new(rgb.width(), rgb.height());
    for (x, y, p) in rgb.enumerate_pixels() {
        gray.put_pixel(x, y, Luma([0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]]));
    }
    let resized = image::imageops::resize(&gray, width, height, FilterType::Triangle);
    let mut row = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            row.push(f64::from(resized.get_pixel(x, y)[0]));
        }
    }
    Ok(row)
}

/// Loads a numeric feature matrix and a parallel label column, reordering
/// rows labeled-first. The label file holds one entry per feature row; an
/// empty entry marks the row unlabeled.
pub fn load_matrix_csv(features: &Path, labels: &Path, has_header: bool) -> Result<Dataset> {
    let feature_rows = read_numeric_csv(features, has_header)?;
    let label_column = read_label_column(labels, has_header)?;
    if label_column.len() != feature_rows.len() {
        return Err(DatasetError::InvalidArg(format!(
            "{} feature rows but {} label rows",
            feature_rows.len(),
            label_column.len()
        )));
    }

    let q = feature_rows.len();
    let mut order: Vec<usize> = (0..q).filter(|&i| label_column[i].is_some()).collect();
    order.extend((0..q).filter(|&i| label_column[i].is_none()));

    let n = feature_rows.first().map(Vec::len).unwrap_or(0);
    if q == 0 || n == 0 {
        return Err(DatasetError::InvalidArg("empty feature matrix".into()));
    }
    let mut samples = DMatrix::zeros(q, n);
    let mut labels_out = Vec::with_capacity(q);
    for (new_row, &old_row) in order.iter().enumerate() {
        for (j, v) in feature_rows[old_row].iter().enumerate() {
            samples[(new_row, j)] = *v;
        }
        labels_out.push(label_column[old_row]);
    }
    Dataset::with_original_indices(samples, labels_out, order)
}

fn read_numeric_csv(path: &Path, has_header: bool) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 1;
        let record = record.map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            row: row_no,
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(record.len());
        for field in record.iter() {
            let value: f64 = field.parse().map_err(|_| DatasetError::Parse {
                path: path.to_path_buf(),
                row: row_no,
                message: format!("not a number: {field:?}"),
            })?;
            row.push(value);
        }
        if let Some(w) = width {
            if row.len() != w {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("expected {w} columns, found {}", row.len()),
                });
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_label_column(path: &Path, has_header: bool) -> Result<Vec<Option<usize>>> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;

    let mut labels = Vec::new();
    let mut lines = text.lines().enumerate();
    if has_header {
        lines.next();
    }
    for (idx, line) in lines {
        let row_no = if has_header { idx } else { idx + 1 };
        let field = line.trim();
        if field.is_empty() {
            labels.push(None);
            continue;
        }
        let value: i64 = field.parse().map_err(|_| DatasetError::Parse {
            path: path.to_path_buf(),
            row: row_no,
            message: format!("not an integer label: {field:?}"),
        })?;
        if value < 1 {
            return Err(DatasetError::LabelOutOfRange {
                row: row_no,
                label: value,
            });
        }
        labels.push(Some(value as usize));
    }
    // A trailing run of empty lines may be swallowed by `lines`; the caller
    // checks the row count against the feature matrix.
    Ok(labels)
}

/// Generates `classes` vertically offset sinusoids in the plane, fully
/// labeled, with Gaussian coordinate noise of the given scale.
///
/// Class m occupies the curve `y = 0.5 sin(x) + 2 (m - 1)` for
/// `x` drawn uniformly from `[0, 2 pi)`.
pub fn synthetic_curves(classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 {
        return Err(DatasetError::InvalidArg(
            "classes and per_class must be positive".into(),
        ));
    }
    if !(noise >= 0.0) {
        return Err(DatasetError::InvalidArg("noise must be nonnegative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = classes * per_class;
    let mut samples = DMatrix::zeros(q, 2);
    let mut labels = Vec::with_capacity(q);
    let mut row = 0;
    for class in 1..=classes {
        let offset = 2.0 * (class as f64 - 1.0);
        for _ in 0..per_class {
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let (mut x, mut y) = (t, 0.5 * t.sin() + offset);
            if noise > 0.0 {
                x += noise * standard_normal(&mut rng);
                y += noise * standard_normal(&mut rng);
            }
            samples[(row, 0)] = x;
            samples[(row, 1)] = y;
            labels.push(Some(class));
            row += 1;
        }
    }
    Dataset::from_parts(samples, labels)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and portable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Keeps a stratified fraction of each class labeled and hides the rest,
/// reordering rows labeled-first. Per class the kept count is
/// `round(labeled_ratio * class_size)`; a class rounding to zero is an error.
pub fn split_labels(ds: &Dataset, labeled_ratio: f64, seed: u64) -> Result<Dataset> {
    if !(labeled_ratio > 0.0 && labeled_ratio < 1.0) {
        return Err(DatasetError::InvalidArg(format!(
            "labeled_ratio must lie in (0, 1), got {labeled_ratio}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = Vec::new();
    for class in 1..=ds.class_count() {
        let members: Vec<usize> = (0..ds.total_count())
            .filter(|&i| ds.label(i) == Some(class))
            .collect();
        let count = (labeled_ratio * members.len() as f64).round() as usize;
        if count == 0 {
            return Err(DatasetError::EmptySplit {
                class,
                ratio: labeled_ratio,
            });
        }
        let mut pool = members;
        // Fisher-Yates so the draw order, not the pool order, decides.
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        kept.extend(pool.into_iter().take(count));
    }
    kept.sort_unstable();

    let kept_set: HashSet<usize> = kept.iter().copied().collect();
    let mut order = kept.clone();
    order.extend((0..ds.total_count()).filter(|i| !kept_set.contains(i)));

    let n = ds.dim();
    let mut samples = DMatrix::zeros(ds.total_count(), n);
    let mut labels = Vec::with_capacity(ds.total_count());
    let mut original = Vec::with_capacity(ds.total_count());
    for (new_row, &old_row) in order.iter().enumerate() {
        samples.set_row(new_row, &ds.samples.row(old_row));
        labels.push(if kept_set.contains(&old_row) {
            ds.label(old_row)
        } else {
            None
        });
        original.push(ds.original_index(old_row));
    }
    Dataset::with_original_indices(samples, labels, original)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn toy_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DMatrix::from_row_slice(rows.len(), n, &flat)
    }

    #[test]
    fn from_parts_accepts_labeled_prefix() {
        let samples = toy_matrix(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
        let ds = Dataset::from_parts(samples, vec![Some(1), Some(2), None]).unwrap();
        assert_eq!(ds.labeled_count(), 2);
        assert_eq!(ds.total_count(), 3);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.training_labels(), vec![1, 2]);
    }

    #[test]
    fn from_parts_rejects_label_after_gap() {
        let samples = toy_matrix(&[&[0.0], &[1.0], &[2.0]]);
        let err = Dataset::from_parts(samples, vec![Some(1), None, Some(1)]).unwrap_err();
        assert!(matches!(err, DatasetError::LabeledAfterUnlabeled(2)));
    }

    #[test]
    fn from_parts_rejects_missing_class() {
        let samples = toy_matrix(&[&[0.0], &[1.0]]);
        let err = Dataset::from_parts(samples, vec![Some(1), Some(3)]).unwrap_err();
        assert!(matches!(err, DatasetError::MissingClass(2)));
    }

    #[test]
    fn from_parts_rejects_duplicate_rows() {
        let samples = toy_matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[1.0, 2.0]]);
        let err = Dataset::from_parts(samples, vec![Some(1), Some(1), None]).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateRows(0, 2)));
    }

    #[test]
    fn from_parts_rejects_zero_label() {
        let samples = toy_matrix(&[&[0.0], &[1.0]]);
        let err = Dataset::from_parts(samples, vec![Some(0), Some(1)]).unwrap_err();
        assert!(matches!(err, DatasetError::LabelOutOfRange { .. }));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = synthetic_curves(2, 15, 0.05, 9).unwrap();
        let b = synthetic_curves(2, 15, 0.05, 9).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = synthetic_curves(2, 15, 0.05, 10).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn synthetic_noise_free_points_lie_on_curves() {
        let ds = synthetic_curves(3, 8, 0.0, 4).unwrap();
        assert_eq!(ds.total_count(), 24);
        assert_eq!(ds.labeled_count(), 24);
        for i in 0..ds.total_count() {
            let class = ds.label(i).unwrap();
            let x = ds.samples()[(i, 0)];
            let y = ds.samples()[(i, 1)];
            let expect = 0.5 * x.sin() + 2.0 * (class as f64 - 1.0);
            assert!((y - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn split_half_of_ten_per_class_keeps_five() {
        let ds = synthetic_curves(2, 10, 0.0, 1).unwrap();
        let split = split_labels(&ds, 0.5, 7).unwrap();
        assert_eq!(split.labeled_count(), 10);
        assert_eq!(split.total_count(), 20);
        let per_class: Vec<usize> = (1..=2)
            .map(|c| split.training_labels().iter().filter(|&&l| l == c).count())
            .collect();
        assert_eq!(per_class, vec![5, 5]);
    }

    #[test]
    fn split_preserves_rows_and_label_association() {
        let ds = synthetic_curves(2, 10, 0.1, 2).unwrap();
        let split = split_labels(&ds, 0.3, 11).unwrap();
        for i in 0..split.total_count() {
            let orig = split.original_index(i);
            assert_eq!(split.sample(i), ds.sample(orig));
            if let Some(l) = split.label(i) {
                assert_eq!(Some(l), ds.label(orig));
            }
        }
        let mut seen: Vec<usize> = (0..split.total_count())
            .map(|i| split.original_index(i))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.total_count()).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let ds = synthetic_curves(2, 20, 0.1, 3).unwrap();
        let a = split_labels(&ds, 0.4, 5).unwrap();
        let b = split_labels(&ds, 0.4, 5).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.labels(), b.labels());
        let c = split_labels(&ds, 0.4, 6).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn split_rejects_ratio_that_empties_a_class() {
        let ds = synthetic_curves(2, 10, 0.0, 1).unwrap();
        let err = split_labels(&ds, 0.04, 1).unwrap_err();
        assert!(matches!(err, DatasetError::EmptySplit { class: 1, .. }));
    }

    #[test]
    fn csv_reorders_labeled_first_with_index_map() {
        let dir = tempfile::tempdir().unwrap();
        let features = dir.path().join("x.csv");
        let labels = dir.path().join("y.csv");
        std::fs::write(&features, "0.0,0.0\n1.0,1.0\n2.0,2.0\n3.0,3.0\n").unwrap();
        std::fs::write(&labels, "\n2\n\n1\n").unwrap();
        let ds = load_matrix_csv(&features, &labels, false).unwrap();
        assert_eq!(ds.labeled_count(), 2);
        assert_eq!(ds.total_count(), 4);
        assert_eq!(ds.label(0), Some(2));
        assert_eq!(ds.label(1), Some(1));
        assert_eq!(ds.original_index(0), 1);
        assert_eq!(ds.original_index(1), 3);
        assert_eq!(ds.original_index(2), 0);
        assert_eq!(ds.samples()[(0, 0)], 1.0);
        assert_eq!(ds.samples()[(1, 0)], 3.0);
    }

    #[test]
    fn csv_reports_parse_row() {
        let dir = tempfile::tempdir().unwrap();
        let features = dir.path().join("x.csv");
        let labels = dir.path().join("y.csv");
        std::fs::write(&features, "0.0,0.0\n1.0,oops\n").unwrap();
        std::fs::write(&labels, "1\n1\n").unwrap();
        match load_matrix_csv(&features, &labels, false) {
            Err(DatasetError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let features = dir.path().join("x.csv");
        let labels = dir.path().join("y.csv");
        std::fs::write(&features, "0.0\n1.0\n").unwrap();
        std::fs::write(&labels, "1\n0\n").unwrap();
        match load_matrix_csv(&features, &labels, false) {
            Err(DatasetError::LabelOutOfRange { row, label }) => {
                assert_eq!(row, 2);
                assert_eq!(label, 0);
            }
            other => panic!("expected out-of-range error, got {other:?}"),
        }
    }

    #[test]
    fn csv_honors_header_flag() {
        let dir = tempfile::tempdir().unwrap();
        let features = dir.path().join("x.csv");
        let labels = dir.path().join("y.csv");
        std::fs::write(&features, "a,b\n0.0,0.0\n1.0,1.0\n").unwrap();
        std::fs::write(&labels, "label\n1\n2\n").unwrap();
        let ds = load_matrix_csv(&features, &labels, true).unwrap();
        assert_eq!(ds.total_count(), 2);
        assert_eq!(ds.training_labels(), vec![1, 2]);
    }

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    #[test]
    fn image_tree_loads_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (class, value) in [("a_first", 60u8), ("b_second", 200u8)] {
            let class_dir = dir.path().join(class);
            std::fs::create_dir(&class_dir).unwrap();
            write_png(&class_dir.join("img0.png"), 6, 4, value);
            write_png(&class_dir.join("img1.png"), 6, 4, value.wrapping_add(5));
        }
        let ds = load_image_dirs(dir.path(), (3, 2)).unwrap();
        assert_eq!(ds.total_count(), 4);
        assert_eq!(ds.dim(), 6);
        assert_eq!(ds.training_labels(), vec![1, 1, 2, 2]);
        // Constant gray image stays constant after resize and sits at v/255.
        let expect = 60.0 / 255.0;
        for j in 0..ds.dim() {
            assert!((ds.samples()[(0, j)] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn image_loading_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let class_dir = dir.path().join("only");
        std::fs::create_dir(&class_dir).unwrap();
        let mut img = image::RgbImage::new(8, 8);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 30) as u8, (y * 25) as u8, 128]);
        }
        img.save(class_dir.join("grad.png")).unwrap();
        write_png(&class_dir.join("flat.png"), 8, 8, 10);
        let a = load_image_dirs(dir.path(), (4, 4)).unwrap();
        let b = load_image_dirs(dir.path(), (4, 4)).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn image_empty_class_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("full")).unwrap();
        write_png(&dir.path().join("full").join("a.png"), 4, 4, 9);
        std::fs::create_dir(dir.path().join("hollow")).unwrap();
        let err = load_image_dirs(dir.path(), (2, 2)).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyClassDir(_)));
    }

    #[test]
    fn image_unreadable_file_errors_with_name() {
        let dir = tempfile::tempdir().unwrap();
        let class_dir = dir.path().join("c");
        std::fs::create_dir(&class_dir).unwrap();
        let mut f = std::fs::File::create(class_dir.join("bad.png")).unwrap();
        f.write_all(b"this is not a png").unwrap();
        match load_image_dirs(dir.path(), (2, 2)) {
            Err(DatasetError::ImageDecode { path, .. }) => {
                assert!(path.ends_with("bad.png"));
            }
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
