//! Exact k-nearest-neighbor search with normalized label voting.
//!
//! The index keeps every stored vector and answers queries by linear scan.
//! Neighbors are ordered by `(distance, sample id)`, so results are fully
//! deterministic, ties included.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};

/// Tolerance on the unit-sum property of vote vectors.
pub const VOTE_SUM_TOL: f64 = 1e-9;

/// Penultimate-layer features paired with (noisy) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Matrix,
    labels: Vec<usize>,
    num_labels: usize,
}

impl EmbeddingSet {
    pub fn new(vectors: Matrix, labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::EmptyInput("embedding set has no samples".into()));
        }
        if vectors.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} vectors but {} labels",
                vectors.rows(),
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= num_labels) {
            return Err(Error::range(format!(
                "label {l} of sample {i} is not below L={num_labels}"
            )));
        }
        Ok(Self {
            vectors,
            labels,
            num_labels,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(
        rows: &[R],
        labels: Vec<usize>,
        num_labels: usize,
    ) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, labels, num_labels)
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

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// A label distribution: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteVector(Vec<f64>);

impl VoteVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(Error::Validation("vote vector has a negative entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > VOTE_SUM_TOL {
            return Err(Error::Validation(format!("vote vector sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(label: usize, num_labels: usize) -> Self {
        let mut probs = vec![0.0; num_labels];
        probs[label] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most voted label, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// Fraction of the neighbors carrying each label.
pub fn vote_pdf(neighbor_labels: &[usize], num_labels: usize) -> Result<VoteVector> {
    if neighbor_labels.is_empty() {
        return Err(Error::range("voting needs at least one neighbor"));
    }
    let mut counts = vec![0usize; num_labels];
    for &l in neighbor_labels {
        if l >= num_labels {
            return Err(Error::range(format!(
                "label {l} is not below L={num_labels}"
            )));
        }
        counts[l] += 1;
    }
    let k = neighbor_labels.len() as f64;
    Ok(VoteVector(
        counts.into_iter().map(|c| c as f64 / k).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Manhattan distance.
    #[default]
    L1,
    /// Euclidean distance; ranked by its square, which orders identically.
    L2,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" | "manhattan" => Ok(Metric::L1),
            "l2" | "L2" | "euclidean" => Ok(Metric::L2),
            other => Err(Error::Validation(format!("unknown metric `{other}`"))),
        }
    }
}

impl Metric {
    #[inline]
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        }
    }
}

#[inline]
fn by_distance_then_id(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Reference kNN: scores every stored vector, sorts all of them by
/// `(distance, id)` and keeps the first `k`. L2 uses the true Euclidean distance.
pub fn brute_force_neighbors(
    set: &EmbeddingSet,
    query: &[f64],
    k: usize,
    metric: Metric,
) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = set
        .vectors()
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let d = match metric {
                Metric::L1 => metric.distance(query, row),
                Metric::L2 => metric.distance(query, row).sqrt(),
            };
            (d, i)
        })
        .collect();
    all.sort_by(by_distance_then_id);
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Immutable exact kNN index.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    set: EmbeddingSet,
    metric: Metric,
}

/// Builds an L1 index over the embeddings.
pub fn build_index(embeddings: EmbeddingSet) -> Result<KnnIndex> {
    KnnIndex::new(embeddings, Metric::L1)
}

impl KnnIndex {
    pub fn new(embeddings: EmbeddingSet, metric: Metric) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyInput("cannot index an empty set".into()));
        }
        Ok(Self {
            set: embeddings,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn num_labels(&self) -> usize {
        self.set.num_labels()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        &self.set
    }

    /// Number of stored scalar values, `n * d`.
    pub fn stored_values(&self) -> usize {
        self.set.len() * self.set.dim()
    }

    fn check_query(&self, query: &[f64], k: usize, available: usize) -> Result<()> {
        if query.len() != self.dim() {
            return Err(Error::shape(format!(
                "query has width {} but the index stores width {}",
                query.len(),
                self.dim()
            )));
        }
        if k == 0 || k > available {
            return Err(Error::range(format!("k={k} is outside [1, {available}]")));
        }
        Ok(())
    }

    /// Ids of the `k` stored samples closest to `query`, ascending by `(distance, id)`.
    pub fn query(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        self.check_query(query, k, self.len())?;
        Ok(self.nearest(query, k, None))
    }

    /// Like [`KnnIndex::query`] but never returns the stored sample `exclude`.
    pub fn query_excluding(&self, query: &[f64], k: usize, exclude: usize) -> Result<Vec<usize>> {
        let available = if exclude < self.len() {
            self.len() - 1
        } else {
            self.len()
        };
        self.check_query(query, k, available)?;
        Ok(self.nearest(query, k, Some(exclude)))
    }

    fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
        let vectors = self.set.vectors();
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|i| Some(*i) != exclude)
            .map(|i| (self.metric.distance(query, vectors.row(i)), i))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_distance_then_id);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance_then_id);
        scored.into_iter().map(|(_, i)| i).collect()
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.set.labels()[i]).collect()
    }

    /// Normalized vote of the `k` nearest neighbors.
    pub fn pdf(&self, query: &[f64], k: usize) -> Result<VoteVector> {
        let ids = self.query(query, k)?;
        vote_pdf(&self.labels_of(&ids), self.num_labels())
    }

    /// kNN label: argmax of the vote, lowest label on ties.
    pub fn classify(&self, query: &[f64], k: usize) -> Result<usize> {
        Ok(self.pdf(query, k)?.argmax())
    }

    /// Vote vectors for every row of `queries`, computed in parallel.
    pub fn pdf_batch(&self, queries: &Matrix, k: usize) -> Result<Matrix> {
        if queries.cols() != self.dim() {
            return Err(Error::shape(format!(
                "queries have width {} but the index stores width {}",
                queries.cols(),
                self.dim()
            )));
        }
        if k == 0 || k > self.len() {
            return Err(Error::range(format!(
                "k={k} is outside [1, {}]",
                self.len()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..queries.rows())
            .into_par_iter()
            .map(|r| self.pdf(queries.row(r), k).map(VoteVector::into_inner))
            .collect::<Result<_>>()?;
        let l = self.num_labels();
        Matrix::from_vec(rows.len(), l, rows.into_iter().flatten().collect())
    }

    /// Precomputes, for every stored sample, its `k_max` nearest stored
    /// neighbors. With `include_self` the sample is eligible as its own
    /// neighbor; otherwise it is removed from its own list.
    pub fn neighbor_table(&self, k_max: usize, include_self: bool) -> Result<NeighborTable> {
        let available = if include_self {
            self.len()
        } else {
            self.len() - 1
        };
        if k_max == 0 || k_max > available {
            return Err(Error::range(format!(
                "k_max={k_max} is outside [1, {available}]"
            )));
        }
        let vectors = self.set.vectors();
        let lists: Vec<Vec<usize>> = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let exclude = if include_self { None } else { Some(i) };
                self.nearest(vectors.row(i), k_max, exclude)
            })
            .collect();
        Ok(NeighborTable {
            k_max,
            include_self,
            labels: lists.iter().map(|ids| self.labels_of(ids)).collect(),
            num_labels: self.num_labels(),
        })
    }
}

/// Neighbor labels of every stored sample, nearest first, up to `k_max`.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    k_max: usize,
    include_self: bool,
    labels: Vec<Vec<usize>>,
    num_labels: usize,
}

impl NeighborTable {
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn include_self(&self) -> bool {
        self.include_self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Vote of the `k` nearest neighbors of stored sample `i`.
    pub fn vote(&self, i: usize, k: usize) -> Result<VoteVector> {
        if k == 0 || k > self.k_max {
            return Err(Error::range(format!(
                "k={k} is outside [1, {}]",
                self.k_max
            )));
        }
        let row = self
            .labels
            .get(i)
            .ok_or_else(|| Error::range(format!("sample {i} is not in the table")))?;
        vote_pdf(&row[..k], self.num_labels)
    }
}
