//! Labeled datasets, the Gaussian toy generator and the dataset text format.
//!
//! ```text
//! DATASET v1 n=<n> d=<d> L=<L>
//! <x_1> ... <x_d> <label>
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::knn::EmbeddingSet;
use crate::matrix::Matrix;
use crate::nn::io::format_value;
use crate::rng::seeded;

pub const DATASET_MAGIC: &str = "DATASET v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Clean,
    /// Labels were resampled through a transition matrix; carries a description of it.
    Noisy(String),
    /// Read from a file, whose label quality is unknown.
    Loaded(PathBuf),
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    vectors: Matrix,
    labels: Vec<usize>,
    num_labels: usize,
    provenance: Provenance,
}

/// Equality covers samples, labels and label count; provenance is metadata.
impl PartialEq for LabeledDataset {
    fn eq(&self, other: &Self) -> bool {
        self.num_labels == other.num_labels
            && self.labels == other.labels
            && self.vectors == other.vectors
    }
}

impl LabeledDataset {
    pub fn new(
        vectors: Matrix,
        labels: Vec<usize>,
        num_labels: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::EmptyInput("dataset has no samples".into()));
        }
        if vectors.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} vectors but {} labels",
                vectors.rows(),
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= num_labels) {
            return Err(Error::Validation(format!(
                "label {l} of sample {i} is not below L={num_labels}"
            )));
        }
        Ok(Self {
            vectors,
            labels,
            num_labels,
            provenance,
        })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Same samples with replacement labels.
    pub fn relabeled(&self, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        Self::new(self.vectors.clone(), labels, self.num_labels, provenance)
    }

    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        Self::new(
            self.vectors.select_rows(ids),
            ids.iter().map(|&i| self.labels[i]).collect(),
            self.num_labels,
            self.provenance.clone(),
        )
    }

    /// One-hot rows of the labels.
    pub fn one_hot_targets(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.num_labels);
        for (i, &c) in self.labels.iter().enumerate() {
            m.set(i, c, 1.0);
        }
        m
    }

    pub fn into_embeddings(self) -> EmbeddingSet {
        EmbeddingSet::new(self.vectors, self.labels, self.num_labels)
            .expect("dataset invariants imply embedding invariants")
    }
}

/// Axis-independent 2-D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl GaussianSpec {
    pub fn new(mean: [f64; 2], std: [f64; 2]) -> Result<Self> {
        if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::range("standard deviations must be positive"));
        }
        Ok(Self { mean, std })
    }
}

/// Default toy classes: means (0.1,0.1), (0.8,0.1), (0.5,0.5), all with std 0.1.
pub fn default_toy_specs() -> [GaussianSpec; 3] {
    [
        GaussianSpec {
            mean: [0.1, 0.1],
            std: [0.1, 0.1],
        },
        GaussianSpec {
            mean: [0.8, 0.1],
            std: [0.1, 0.1],
        },
        GaussianSpec {
            mean: [0.5, 0.5],
            std: [0.1, 0.1],
        },
    ]
}

/// Draws `n_per_class` points from each Gaussian; class `c` gets label `c`.
/// Samples are grouped by class in label order.
pub fn gen_toy(n_per_class: usize, seed: u64, specs: &[GaussianSpec]) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::range("n_per_class must be at least 1"));
    }
    if specs.is_empty() {
        return Err(Error::EmptyInput("no class distributions given".into()));
    }
    for s in specs {
        GaussianSpec::new(s.mean, s.std)?;
    }
    let mut rng = seeded(seed);
    let n = n_per_class * specs.len();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (class, spec) in specs.iter().enumerate() {
        for _ in 0..n_per_class {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            data.push(spec.mean[0] + spec.std[0] * a);
            data.push(spec.mean[1] + spec.std[1] * b);
            labels.push(class);
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(n, 2, data)?,
        labels,
        specs.len(),
        Provenance::Clean,
    )
}

pub fn dataset_to_string(ds: &LabeledDataset) -> String {
    let mut out = String::with_capacity(ds.len() * (ds.dim() + 1) * 24);
    let _ = writeln!(
        out,
        "{DATASET_MAGIC} n={} d={} L={}",
        ds.len(),
        ds.dim(),
        ds.num_labels()
    );
    for (row, label) in ds.vectors.iter_rows().zip(&ds.labels) {
        for v in row {
            out.push_str(&format_value(*v));
            out.push(' ');
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_string(ds)).map_err(|e| Error::io(path, e))
}

fn header_field(token: Option<&str>, key: &str, line: usize) -> Result<usize> {
    let token = token.ok_or_else(|| Error::parse(line, format!("header is missing `{key}=`")))?;
    token
        .strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(line, format!("expected `{key}=<int>`, found `{token}`")))
}

pub fn parse_dataset(text: &str, provenance: Provenance) -> Result<LabeledDataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::EmptyInput("dataset file is empty".into()));
    };
    let mut tokens = header.split_whitespace();
    let magic = [tokens.next(), tokens.next()];
    if magic != [Some("DATASET"), Some("v1")] {
        return Err(Error::parse(
            1,
            format!("expected `{DATASET_MAGIC}` header, found `{header}`"),
        ));
    }
    let n = header_field(tokens.next(), "n", 1)?;
    let d = header_field(tokens.next(), "d", 1)?;
    let num_labels = header_field(tokens.next(), "L", 1)?;
    if n == 0 {
        return Err(Error::EmptyInput("dataset header declares n=0".into()));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if labels.len() == n {
            return Err(Error::parse(
                line_no,
                format!("more rows than the declared n={n}"),
            ));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != d + 1 {
            return Err(Error::parse(
                line_no,
                format!("expected {} fields, found {}", d + 1, tokens.len()),
            ));
        }
        for t in &tokens[..d] {
            let v = t
                .parse::<f64>()
                .map_err(|_| Error::parse(line_no, format!("bad number `{t}`")))?;
            data.push(v);
        }
        let label: usize = tokens[d]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad label `{}`", tokens[d])))?;
        if label >= num_labels {
            return Err(Error::Validation(format!(
                "line {line_no}: label {label} is not below L={num_labels}"
            )));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(Error::parse(
            text.lines().count() + 1,
            format!(
                "header declares n={n} rows but the file has {}",
                labels.len()
            ),
        ));
    }
    LabeledDataset::new(
        Matrix::from_vec(n, d, data)?,
        labels,
        num_labels,
        provenance,
    )
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, Provenance::Loaded(path.to_path_buf()))
}

/// Reads externally produced embeddings stored in the dataset format.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    Ok(load_dataset(path)?.into_embeddings())
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let ds = LabeledDataset::new(
        set.vectors().clone(),
        set.labels().to_vec(),
        set.num_labels(),
        Provenance::Clean,
    )?;
    save_dataset(&ds, path)
}

/// Seeded shuffle, then the first `floor(n * test_fraction)` samples become the
/// test part. Returns `(train, test)`.
pub fn split(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::range(format!(
            "test fraction {test_fraction} is outside (0, 1)"
        )));
    }
    let n = ds.len();
    let n_test = (n as f64 * test_fraction).floor() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::range(format!(
            "splitting {n} samples at {test_fraction} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let (test_ids, train_ids) = order.split_at(n_test);
    Ok((ds.subset(train_ids)?, ds.subset(test_ids)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_bookkeeping_and_determinism() {
        let ds = gen_toy(1, 3, &default_toy_specs()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        let a = gen_toy(50, 9, &default_toy_specs()).unwrap();
        let b = gen_toy(50, 9, &default_toy_specs()).unwrap();
        assert_eq!(a.vectors().as_slice(), b.vectors().as_slice());
        assert!(gen_toy(0, 9, &default_toy_specs()).is_err());
    }

    #[test]
    fn toy_class_mean_within_clt_bound() {
        let n = 100_000;
        let ds = gen_toy(n, 17, &default_toy_specs()[..1]).unwrap();
        let bound = 3.0 * 0.1 / (n as f64).sqrt();
        for axis in 0..2 {
            let mean = ds.vectors().iter_rows().map(|r| r[axis]).sum::<f64>() / n as f64;
            assert!((mean - 0.1).abs() < bound, "axis {axis}: mean {mean}");
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let ds = gen_toy(20, 5, &default_toy_specs()).unwrap();
        let back = parse_dataset(&dataset_to_string(&ds), Provenance::Clean).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_files() {
        let short = "DATASET v1 n=3 d=1 L=2\n0.5 1\n0.25 0\n";
        assert!(matches!(
            parse_dataset(short, Provenance::Clean),
            Err(Error::Parse { .. })
        ));
        let bad_label = "DATASET v1 n=1 d=1 L=2\n0.5 2\n";
        assert!(matches!(
            parse_dataset(bad_label, Provenance::Clean),
            Err(Error::Validation(_))
        ));
        let bad_row = "DATASET v1 n=1 d=2 L=2\n0.5 1\n";
        match parse_dataset(bad_row, Provenance::Clean) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_dataset("", Provenance::Clean),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            parse_dataset("DATASET v2 n=1 d=1 L=2\n", Provenance::Clean),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn embeddings_file_dimensions() {
        let text = "DATASET v1 n=2 d=3 L=2\n0 1 2 0\n3 4 5 1\n";
        let set = parse_dataset(text, Provenance::Clean)
            .unwrap()
            .into_embeddings();
        assert_eq!((set.len(), set.dim(), set.num_labels()), (2, 3, 2));
    }

    #[test]
    fn split_partitions_the_samples() {
        let ds = gen_toy(10, 2, &default_toy_specs()[..1]).unwrap();
        let (train, test) = split(&ds, 0.3, 8).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let mut all: Vec<u64> = train
            .vectors()
            .iter_rows()
            .chain(test.vectors().iter_rows())
            .map(|r| r[0].to_bits())
            .collect();
        let mut orig: Vec<u64> = ds.vectors().iter_rows().map(|r| r[0].to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        let (train2, _) = split(&ds, 0.3, 8).unwrap();
        assert_eq!(train, train2);
        assert!(matches!(split(&ds, 1.0, 8), Err(Error::Range(_))));
        assert!(matches!(split(&ds, 0.0, 8), Err(Error::Range(_))));
    }
}
