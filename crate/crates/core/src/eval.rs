//! Accuracy, kNN-vs-kNet distribution curves, decision-region rasters and
//! memory bookkeeping.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knet::KnetModel;
use crate::knn::KnnIndex;
use crate::matrix::Matrix;
use crate::nn::DenseNet;
use crate::prelim::penultimate_features;

/// Anything that maps raw inputs to label distributions.
pub trait Classify {
    fn input_dim(&self) -> usize;

    fn num_labels(&self) -> usize;

    /// One vote vector per input row.
    fn predict_pdf(&self, inputs: &Matrix) -> Result<Matrix>;

    /// Argmax labels, lowest index on ties.
    fn predict_labels(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_pdf(inputs)?.argmax_rows())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Head<'a> {
    Net(&'a DenseNet),
    Knn { index: &'a KnnIndex, k: usize },
    Knet { model: &'a KnetModel, k: usize },
}

/// One of the three compared systems, optionally behind a feature extractor
/// (the preliminary network's penultimate layer).
#[derive(Debug, Clone, Copy)]
pub struct Classifier<'a> {
    features: Option<&'a DenseNet>,
    head: Head<'a>,
}

impl<'a> Classifier<'a> {
    pub fn net(net: &'a DenseNet) -> Self {
        Self {
            features: None,
            head: Head::Net(net),
        }
    }

    pub fn knn(index: &'a KnnIndex, k: usize) -> Self {
        Self {
            features: None,
            head: Head::Knn { index, k },
        }
    }

    pub fn knet(model: &'a KnetModel, k: usize) -> Self {
        Self {
            features: None,
            head: Head::Knet { model, k },
        }
    }

    /// Feeds raw inputs through `prelim`'s penultimate layer before the head.
    pub fn with_features(mut self, prelim: &'a DenseNet) -> Self {
        self.features = Some(prelim);
        self
    }

    pub fn head(&self) -> Head<'a> {
        self.head
    }
}

impl Classify for Classifier<'_> {
    fn input_dim(&self) -> usize {
        match (self.features, self.head) {
            (Some(prelim), _) => prelim.input_dim(),
            (None, Head::Net(net)) => net.input_dim(),
            (None, Head::Knn { index, .. }) => index.dim(),
            (None, Head::Knet { model, .. }) => model.spec().dim,
        }
    }

    fn num_labels(&self) -> usize {
        match self.head {
            Head::Net(net) => net.output_dim(),
            Head::Knn { index, .. } => index.num_labels(),
            Head::Knet { model, .. } => model.num_labels(),
        }
    }

    fn predict_pdf(&self, inputs: &Matrix) -> Result<Matrix> {
        let features;
        let x = match self.features {
            Some(prelim) => {
                features = penultimate_features(prelim, inputs)?;
                &features
            }
            None => inputs,
        };
        match self.head {
            Head::Net(net) => net.predict(x),
            Head::Knn { index, k } => index.pdf_batch(x, k),
            Head::Knet { model, k } => model.predict_batch(x, k),
        }
    }
}

/// Fraction of samples whose predicted label equals the dataset label.
pub fn accuracy<C: Classify + ?Sized>(clf: &C, test: &LabeledDataset) -> Result<f64> {
    if test.dim() != clf.input_dim() {
        return Err(Error::shape(format!(
            "classifier takes width {} but the test set has width {}",
            clf.input_dim(),
            test.dim()
        )));
    }
    let predicted = clf.predict_labels(test.vectors())?;
    let correct = predicted
        .iter()
        .zip(test.labels())
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// A system that emits vote vectors for embeddings at a given `k`.
pub trait PdfSource {
    fn num_labels(&self) -> usize;

    fn pdfs(&self, queries: &Matrix, k: usize) -> Result<Matrix>;
}

impl PdfSource for KnnIndex {
    fn num_labels(&self) -> usize {
        KnnIndex::num_labels(self)
    }

    fn pdfs(&self, queries: &Matrix, k: usize) -> Result<Matrix> {
        self.pdf_batch(queries, k)
    }
}

impl PdfSource for KnetModel {
    fn num_labels(&self) -> usize {
        KnetModel::num_labels(self)
    }

    fn pdfs(&self, queries: &Matrix, k: usize) -> Result<Matrix> {
        self.predict_batch(queries, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub k: usize,
    pub value: f64,
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.contains(&0) {
        return Err(Error::range("k values must be at least 1"));
    }
    Ok(())
}

/// Per `k`, the mean over queries of `(1/L) sum_c |a_c - b_c|`.
pub fn pdf_mad_curve<A, B>(a: &A, b: &B, queries: &Matrix, ks: &[usize]) -> Result<Vec<CurvePoint>>
where
    A: PdfSource + ?Sized,
    B: PdfSource + ?Sized,
{
    check_ks(ks)?;
    if a.num_labels() != b.num_labels() {
        return Err(Error::shape("compared systems have different label counts"));
    }
    if queries.rows() == 0 {
        return Err(Error::EmptyInput("no queries".into()));
    }
    let l = a.num_labels() as f64;
    ks.iter()
        .map(|&k| {
            let pa = a.pdfs(queries, k)?;
            let pb = b.pdfs(queries, k)?;
            let total: f64 = pa
                .iter_rows()
                .zip(pb.iter_rows())
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / l)
                .sum();
            Ok(CurvePoint {
                k,
                value: total / queries.rows() as f64,
            })
        })
        .collect()
}

/// Per `k`, the mean over queries of the largest vote entry.
pub fn max_pdf_curve<S: PdfSource + ?Sized>(
    source: &S,
    queries: &Matrix,
    ks: &[usize],
) -> Result<Vec<CurvePoint>> {
    check_ks(ks)?;
    if queries.rows() == 0 {
        return Err(Error::EmptyInput("no queries".into()));
    }
    ks.iter()
        .map(|&k| {
            let p = source.pdfs(queries, k)?;
            let total: f64 = p
                .iter_rows()
                .map(|r| r.iter().copied().fold(0.0, f64::max))
                .sum();
            Ok(CurvePoint {
                k,
                value: total / queries.rows() as f64,
            })
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("k,value\n");
    for p in points {
        let _ = writeln!(out, "{},{:.9}", p.k, p.value);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        if !(xmax > xmin && ymax > ymin) {
            return Err(Error::range("bounding box must have positive extent"));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    /// `[-0.2, 1.2]^2`, which covers the toy Gaussians.
    pub fn toy_default() -> Self {
        Self {
            xmin: -0.2,
            ymin: -0.2,
            xmax: 1.2,
            ymax: 1.2,
        }
    }
}

/// Row-major label grid; row `j` covers the `j`-th band of y counted up from
/// `ymin`. Images flip it so that `ymax` is the top row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
}

impl LabelGrid {
    pub fn get(&self, col: usize, row: usize) -> usize {
        self.labels[row * self.width + col]
    }

    /// Fraction of cells where two equally sized grids disagree.
    pub fn disagreement(&self, other: &LabelGrid) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape("grids have different sizes"));
        }
        let diff = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count();
        Ok(diff as f64 / self.labels.len() as f64)
    }

    pub fn to_pixmap(&self, num_labels: usize) -> Pixmap {
        Pixmap {
            width: self.width,
            height: self.height,
            pixels: self
                .labels
                .chunks(self.width)
                .rev()
                .flatten()
                .map(|&c| class_color(c, num_labels))
                .collect(),
        }
    }
}

fn cell_centers(bbox: BBox, width: usize, height: usize) -> Matrix {
    let dx = (bbox.xmax - bbox.xmin) / width as f64;
    let dy = (bbox.ymax - bbox.ymin) / height as f64;
    let mut data = Vec::with_capacity(2 * width * height);
    for row in 0..height {
        let y = bbox.ymin + (row as f64 + 0.5) * dy;
        for col in 0..width {
            data.push(bbox.xmin + (col as f64 + 0.5) * dx);
            data.push(y);
        }
    }
    Matrix::from_vec(width * height, 2, data).expect("grid size matches")
}

/// Predicted label at every cell center of a `width x height` grid over `bbox`.
pub fn boundary_raster<C: Classify + ?Sized + Sync>(
    clf: &C,
    bbox: BBox,
    width: usize,
    height: usize,
) -> Result<LabelGrid> {
    if clf.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "decision rasters need a 2-D input, classifier takes {}",
            clf.input_dim()
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::range("raster needs at least one cell per axis"));
    }
    let centers = cell_centers(bbox, width, height);
    // row bands keep memory bounded and parallelize the heavy kNN heads
    let band = width * 16;
    let chunks: Vec<Vec<usize>> = (0..centers.rows())
        .step_by(band)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let ids: Vec<usize> = (start..(start + band).min(centers.rows())).collect();
            clf.predict_labels(&centers.select_rows(&ids))
        })
        .collect::<Result<_>>()?;
    Ok(LabelGrid {
        width,
        height,
        labels: chunks.into_iter().flatten().collect(),
    })
}

/// RGB image written as plain-text PPM (P3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub const PALETTE_COMMENT: &str =
    "# palette: class 0 (220,60,60), class 1 (60,180,75), class 2 (65,105,225), classes >= 3 evenly spaced hues";

impl Pixmap {
    pub fn to_p3(&self) -> String {
        let mut out = String::with_capacity(self.pixels.len() * 12 + 128);
        let _ = writeln!(
            out,
            "P3\n{PALETTE_COMMENT}\n{} {}\n255",
            self.width, self.height
        );
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|[r, g, b]| format!("{r} {g} {b}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Fixed colors for the first three classes, evenly spaced hues after that.
pub fn class_color(class: usize, num_labels: usize) -> [u8; 3] {
    match class {
        0 => [220, 60, 60],
        1 => [60, 180, 75],
        2 => [65, 105, 225],
        c => {
            let extra = num_labels.saturating_sub(3).max(1);
            let hue = 360.0 * (c - 3) as f64 / extra as f64;
            hsv_to_rgb(hue, 0.65, 0.85)
        }
    }
}

fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [u8; 3] {
    let c = val * sat;
    let h = (hue % 360.0) / 60.0;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    let to_byte = |v: f64| ((v + m) * 255.0).round() as u8;
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// Labeled 2-D samples drawn as 3x3 dots on a white background, using the
/// same cell geometry and orientation as [`LabelGrid::to_pixmap`]. Samples outside `bbox` are skipped.
pub fn scatter_pixmap(
    ds: &LabeledDataset,
    bbox: BBox,
    width: usize,
    height: usize,
) -> Result<Pixmap> {
    if ds.dim() != 2 {
        return Err(Error::Unsupported("scatter plots need 2-D samples".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::range("raster needs at least one cell per axis"));
    }
    let mut pixels = vec![[255u8; 3]; width * height];
    let sx = width as f64 / (bbox.xmax - bbox.xmin);
    let sy = height as f64 / (bbox.ymax - bbox.ymin);
    for (p, &label) in ds.vectors().iter_rows().zip(ds.labels()) {
        let col = ((p[0] - bbox.xmin) * sx).floor();
        let row = height as f64 - 1.0 - ((p[1] - bbox.ymin) * sy).floor();
        if col < 0.0 || row < 0.0 || col >= width as f64 || row >= height as f64 {
            continue;
        }
        let (col, row) = (col as i64, row as i64);
        let color = class_color(label, ds.num_labels());
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (row + dr, col + dc);
                if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                    pixels[r as usize * width + c as usize] = color;
                }
            }
        }
    }
    Ok(Pixmap {
        width,
        height,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    /// Values the kNN index must keep: `n * d`.
    pub knn_values: usize,
    pub knet_params: usize,
    pub prelim_params: usize,
    /// `knn_values / knet_params`.
    pub ratio: f64,
}

impl MemoryReport {
    pub fn from_counts(n: usize, d: usize, knet_params: usize, prelim_params: usize) -> Self {
        let knn_values = n * d;
        Self {
            knn_values,
            knet_params,
            prelim_params,
            ratio: if knet_params == 0 {
                0.0
            } else {
                knn_values as f64 / knet_params as f64
            },
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "system,stored_values\nprelim,{}\nknn,{}\nknet,{}\nratio_knn_over_knet,{:.3}\n",
            self.prelim_params, self.knn_values, self.knet_params, self.ratio
        )
    }
}

/// Extra storage each system needs on top of the preliminary network.
pub fn memory_report(knn: &KnnIndex, knet: &KnetModel, prelim: &DenseNet) -> MemoryReport {
    MemoryReport::from_counts(
        knn.len(),
        knn.dim(),
        knet.param_count(),
        prelim.param_count(),
    )
}

/// Human-scale count: `12.8M`, `5K`, `322`.
pub fn format_count(n: usize) -> String {
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if n >= 1_000_000 {
        format!("{}M", trim(format!("{:.2}", n as f64 / 1e6)))
    } else if n >= 1_000 {
        format!("{}K", trim(format!("{:.1}", n as f64 / 1e3)))
    } else {
        n.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub system: String,
    pub k: Option<usize>,
    pub accuracy: f64,
    pub params: usize,
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("system,k,accuracy,params\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{:.6},{}", r.system, k, r.accuracy, r.params);
    }
    out
}
