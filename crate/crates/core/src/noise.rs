//! Label-noise transition matrices `P(noisy | clean)` and their application.
//!
//! The noise models use different rate semantics. [`make_uniform`] resamples
//! the label over all `L` classes, the original included, so the effective
//! corruption is `r (L - 1) / L`. The asymmetric models put exactly `1 - r`
//! on the diagonal.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::io::format_value;
use crate::rng::seeded;

const ROW_SUM_TOL: f64 = 1e-9;

pub const TM_MAGIC: &str = "TM v1";

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    Uniform {
        rate: f64,
    },
    /// Each class flips to `targets[c].0` with `2r/3` and to `targets[c].1` with `r/3`.
    RandomAsymmetric {
        rate: f64,
        targets: Vec<(usize, usize)>,
    },
    SemanticAsymmetric {
        rate: f64,
        pairs: Vec<(usize, usize)>,
    },
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
    kind: NoiseKind,
}

impl TransitionMatrix {
    /// Validates an arbitrary row-stochastic matrix.
    pub fn custom(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::checked(rows, NoiseKind::Custom)
    }

    pub fn identity(num_labels: usize) -> Self {
        let rows = (0..num_labels)
            .map(|i| {
                (0..num_labels)
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            rows,
            kind: NoiseKind::Custom,
        }
    }

    fn checked(rows: Vec<Vec<f64>>, kind: NoiseKind) -> Result<Self> {
        let l = rows.len();
        if l == 0 {
            return Err(Error::EmptyInput("transition matrix has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != l {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {l}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { rows, kind })
    }

    pub fn num_labels(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, clean: usize, noisy: usize) -> f64 {
        self.rows[clean][noisy]
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            NoiseKind::Uniform { rate } => format!("uniform r={rate}"),
            NoiseKind::RandomAsymmetric { rate, .. } => format!("random-asymmetric r={rate}"),
            NoiseKind::SemanticAsymmetric { rate, .. } => format!("semantic r={rate}"),
            NoiseKind::Custom => "custom matrix".to_string(),
        }
    }

    /// Draws a noisy label for `clean` from `u` uniform in `[0, 1)`.
    fn sample(&self, clean: usize, u: f64) -> usize {
        let row = &self.rows[clean];
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding left a sliver above the last cumulative sum
        row.iter().rposition(|p| *p > 0.0).unwrap_or(clean)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::range(format!("noise rate {rate} is outside [0, 1]")));
    }
    Ok(())
}

/// Each label is resampled uniformly over all `L` classes with probability `r`.
pub fn make_uniform(rate: f64, num_labels: usize) -> Result<TransitionMatrix> {
    check_rate(rate)?;
    if num_labels < 2 {
        return Err(Error::range("uniform noise needs at least 2 labels"));
    }
    let off = rate / num_labels as f64;
    let diag = 1.0 - rate + off;
    let rows = (0..num_labels)
        .map(|i| {
            (0..num_labels)
                .map(|j| if i == j { diag } else { off })
                .collect()
        })
        .collect();
    TransitionMatrix::checked(rows, NoiseKind::Uniform { rate })
}

fn asymmetric_from_targets(rate: f64, targets: Vec<(usize, usize)>) -> Result<TransitionMatrix> {
    let l = targets.len();
    let mut rows = vec![vec![0.0; l]; l];
    for (c, &(first, second)) in targets.iter().enumerate() {
        rows[c][c] = 1.0 - rate;
        rows[c][first] += rate * 2.0 / 3.0;
        rows[c][second] += rate / 3.0;
    }
    TransitionMatrix::checked(rows, NoiseKind::RandomAsymmetric { rate, targets })
}

/// Per class, two distinct other classes drawn from the seeded stream receive
/// `2r/3` and `r/3` of the mass; the class keeps `1 - r`.
pub fn make_random_asym(rate: f64, num_labels: usize, seed: u64) -> Result<TransitionMatrix> {
    check_rate(rate)?;
    if num_labels < 3 {
        return Err(Error::Unsupported(
            "random asymmetric noise needs at least 3 labels".into(),
        ));
    }
    let mut rng = seeded(seed);
    let targets = (0..num_labels)
        .map(|c| {
            let mut others: Vec<usize> = (0..num_labels).filter(|&o| o != c).collect();
            others.shuffle(&mut rng);
            (others[0], others[1])
        })
        .collect();
    asymmetric_from_targets(rate, targets)
}

/// Random-asymmetric noise with the cyclic targets `(c+1) mod L` and `(c+2) mod L`.
pub fn make_cyclic_asym(rate: f64, num_labels: usize) -> Result<TransitionMatrix> {
    check_rate(rate)?;
    if num_labels < 3 {
        return Err(Error::Unsupported(
            "random asymmetric noise needs at least 3 labels".into(),
        ));
    }
    let targets = (0..num_labels)
        .map(|c| ((c + 1) % num_labels, (c + 2) % num_labels))
        .collect();
    asymmetric_from_targets(rate, targets)
}

/// Swaps mass `r` between the classes of each pair in both directions;
/// classes outside every pair are left untouched.
pub fn make_semantic(
    pairs: &[(usize, usize)],
    rate: f64,
    num_labels: usize,
) -> Result<TransitionMatrix> {
    check_rate(rate)?;
    let mut used = vec![false; num_labels];
    for &(a, b) in pairs {
        if a == b {
            return Err(Error::Validation(format!(
                "pair ({a},{b}) maps a class to itself"
            )));
        }
        if a >= num_labels || b >= num_labels {
            return Err(Error::range(format!(
                "pair ({a},{b}) is not below L={num_labels}"
            )));
        }
        for c in [a, b] {
            if used[c] {
                return Err(Error::Validation(format!(
                    "class {c} appears in more than one pair"
                )));
            }
            used[c] = true;
        }
    }
    let mut rows: Vec<Vec<f64>> = TransitionMatrix::identity(num_labels).rows;
    for &(a, b) in pairs {
        rows[a][a] = 1.0 - rate;
        rows[a][b] = rate;
        rows[b][b] = 1.0 - rate;
        rows[b][a] = rate;
    }
    TransitionMatrix::checked(
        rows,
        NoiseKind::SemanticAsymmetric {
            rate,
            pairs: pairs.to_vec(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flip {
    pub original: usize,
    pub resulting: usize,
}

impl Flip {
    pub fn flipped(&self) -> bool {
        self.original != self.resulting
    }
}

/// Per-sample audit of a noise application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipRecord {
    pub entries: Vec<Flip>,
}

impl FlipRecord {
    pub fn flip_count(&self) -> usize {
        self.entries.iter().filter(|f| f.flipped()).count()
    }

    /// `counts[clean][noisy]`.
    pub fn transition_counts(&self, num_labels: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; num_labels]; num_labels];
        for f in &self.entries {
            counts[f.original][f.resulting] += 1;
        }
        counts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,original,resulting,flipped\n");
        for (i, f) in self.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{}",
                f.original,
                f.resulting,
                u8::from(f.flipped())
            );
        }
        out
    }
}

/// Samples every noisy label independently from the row of its clean label.
/// Feature vectors are copied unchanged.
pub fn apply_noise(
    dataset: &LabeledDataset,
    tm: &TransitionMatrix,
    seed: u64,
) -> Result<(LabeledDataset, FlipRecord)> {
    if dataset.num_labels() > tm.num_labels() {
        return Err(Error::range(format!(
            "dataset has L={} but the matrix covers only {} labels",
            dataset.num_labels(),
            tm.num_labels()
        )));
    }
    let mut rng = seeded(seed);
    let entries: Vec<Flip> = dataset
        .labels()
        .iter()
        .map(|&original| {
            let u: f64 = rng.random();
            Flip {
                original,
                resulting: tm.sample(original, u),
            }
        })
        .collect();
    let labels = entries.iter().map(|f| f.resulting).collect();
    let noisy = LabeledDataset::new(
        dataset.vectors().clone(),
        labels,
        tm.num_labels(),
        Provenance::Noisy(tm.describe()),
    )?;
    Ok((noisy, FlipRecord { entries }))
}

pub fn tm_to_string(tm: &TransitionMatrix) -> String {
    let mut out = format!("{TM_MAGIC} L={}\n", tm.num_labels());
    for row in tm.rows() {
        let line: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_tm(text: &str) -> Result<TransitionMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::EmptyInput("transition matrix file is empty".into()));
    };
    let l: usize = header
        .strip_prefix(TM_MAGIC)
        .map(str::trim)
        .and_then(|rest| rest.strip_prefix("L="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, format!("expected `{TM_MAGIC} L=<L>`, found `{header}`")))?;
    let mut rows = Vec::with_capacity(l);
    for (idx, line) in lines {
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(idx + 1, format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != l {
            return Err(Error::parse(
                idx + 1,
                format!("expected {l} entries, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != l {
        return Err(Error::parse(
            text.lines().count() + 1,
            format!("expected {l} rows, found {}", rows.len()),
        ));
    }
    TransitionMatrix::custom(rows)
}

pub fn save_tm(tm: &TransitionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tm_to_string(tm)).map_err(|e| Error::io(path, e))
}

pub fn load_tm(path: impl AsRef<Path>) -> Result<TransitionMatrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tm(&text)
}
