//! kNet: a small network trained to reproduce kNN voting vectors.
//!
//! The input is an embedding with `k / k_max` appended as one extra feature.
//! The layer stack is fixed:
//!
//! ```text
//! FC(d+1, h) -> RELU -> BN(h) -> FC(h, L) -> SOFTMAX,   h = max(1, floor(d / 16))
//! ```
//!
//! Training draws one `k` per mini-batch and regresses the normalized vote of
//! the `k` nearest training embeddings.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::knn::{vote_pdf, EmbeddingSet, KnnIndex, Metric, VoteVector};
use crate::matrix::Matrix;
use crate::nn::{fit, read_dense_net, write_dense_net, Batch, DenseNet, LayerSpec, TrainConfig};

pub const KNET_MAGIC: &str = "KNET v1";

/// Default range of `k` for random-k training.
pub const DEFAULT_K_RANGE: (usize, usize) = (1, 101);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnetSpec {
    pub dim: usize,
    pub num_labels: usize,
    pub hidden: usize,
}

impl KnetSpec {
    pub fn new(dim: usize, num_labels: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::range("embedding dimension must be at least 1"));
        }
        if num_labels < 2 {
            return Err(Error::range("kNet needs at least 2 labels"));
        }
        Ok(Self {
            dim,
            num_labels,
            hidden: (dim / 16).max(1),
        })
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::FullyConnected {
                in_dim: self.dim + 1,
                out_dim: self.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::BatchNorm { dim: self.hidden },
            LayerSpec::FullyConnected {
                in_dim: self.hidden,
                out_dim: self.num_labels,
            },
            LayerSpec::Softmax,
        ]
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(&self.layers())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KTrainMode {
    /// One `k` drawn uniformly from `[k_min, k_max]` per batch.
    RandomK {
        k_min: usize,
        k_max: usize,
    },
    FixedK(usize),
}

impl Default for KTrainMode {
    fn default() -> Self {
        KTrainMode::RandomK {
            k_min: DEFAULT_K_RANGE.0,
            k_max: DEFAULT_K_RANGE.1,
        }
    }
}

impl KTrainMode {
    /// Largest `k` the mode can request; also the input scale.
    pub fn k_max(&self) -> usize {
        match *self {
            KTrainMode::RandomK { k_max, .. } => k_max,
            KTrainMode::FixedK(k) => k,
        }
    }

    /// Checks `1 <= k_min <= k_max <= available`.
    pub fn validate(&self, available: usize) -> Result<()> {
        let (lo, hi) = match *self {
            KTrainMode::RandomK { k_min, k_max } => (k_min, k_max),
            KTrainMode::FixedK(k) => (k, k),
        };
        if lo == 0 || lo > hi || hi > available {
            return Err(Error::range(format!(
                "k range [{lo}, {hi}] must satisfy 1 <= k_min <= k_max <= {available}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnetOptions {
    /// Whether a training sample counts among its own neighbors.
    pub include_self: bool,
    pub metric: Metric,
}

impl Default for KnetOptions {
    fn default() -> Self {
        Self {
            include_self: true,
            metric: Metric::L1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnetModel {
    spec: KnetSpec,
    net: DenseNet,
    k_max: usize,
    include_self: bool,
}

impl KnetModel {
    pub fn new(spec: KnetSpec, net: DenseNet, k_max: usize, include_self: bool) -> Result<Self> {
        if net.spec() != spec.layers().as_slice() {
            return Err(Error::Validation(format!(
                "network `{}` is not the kNet stack for d={} L={}",
                crate::nn::spec_tokens(net.spec()),
                spec.dim,
                spec.num_labels
            )));
        }
        if k_max == 0 {
            return Err(Error::range("k_max must be at least 1"));
        }
        Ok(Self {
            spec,
            net,
            k_max,
            include_self,
        })
    }

    pub fn spec(&self) -> &KnetSpec {
        &self.spec
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn include_self(&self) -> bool {
        self.include_self
    }

    pub fn num_labels(&self) -> usize {
        self.spec.num_labels
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Embeddings with the scaled `k` column appended.
    pub fn encode_inputs(&self, embeddings: &Matrix, k: usize) -> Result<Matrix> {
        if embeddings.cols() != self.spec.dim {
            return Err(Error::shape(format!(
                "embedding width {} does not match kNet d={}",
                embeddings.cols(),
                self.spec.dim
            )));
        }
        if k == 0 {
            return Err(Error::range("k must be at least 1"));
        }
        Ok(embeddings.with_constant_column(k as f64 / self.k_max as f64))
    }

    /// Predicted vote vectors for every row.
    pub fn predict_batch(&self, embeddings: &Matrix, k: usize) -> Result<Matrix> {
        self.net.predict(&self.encode_inputs(embeddings, k)?)
    }
}

/// Freshly initialized kNet with default training settings, scaled for `k <= 101`.
pub fn build_knet(dim: usize, num_labels: usize) -> Result<KnetModel> {
    init_knet(
        dim,
        num_labels,
        DEFAULT_K_RANGE.1,
        true,
        &TrainConfig::default(),
    )
}

pub fn init_knet(
    dim: usize,
    num_labels: usize,
    k_max: usize,
    include_self: bool,
    cfg: &TrainConfig,
) -> Result<KnetModel> {
    let spec = KnetSpec::new(dim, num_labels)?;
    let mut net = cfg.init_net(spec.layers())?;
    net.set_mode(crate::nn::Mode::Infer);
    KnetModel::new(spec, net, k_max, include_self)
}

/// Vote of the `k` nearest stored neighbors of stored sample `i`.
pub fn make_target(index: &KnnIndex, i: usize, k: usize, include_self: bool) -> Result<VoteVector> {
    if i >= index.len() {
        return Err(Error::range(format!("sample {i} is not in the index")));
    }
    let query = index.embeddings().vectors().row(i);
    let ids = if include_self {
        index.query(query, k)?
    } else {
        index.query_excluding(query, k, i)?
    };
    vote_pdf(&index.labels_of(&ids), index.num_labels())
}

/// Trains a kNet on the given embeddings and their (noisy) labels.
pub fn train_knet(
    embeddings: &EmbeddingSet,
    mode: KTrainMode,
    cfg: &TrainConfig,
    options: KnetOptions,
) -> Result<KnetModel> {
    train_knet_with_history(embeddings, mode, cfg, options).map(|(model, _)| model)
}

/// [`train_knet`] plus the mean training loss of every epoch.
pub fn train_knet_with_history(
    embeddings: &EmbeddingSet,
    mode: KTrainMode,
    cfg: &TrainConfig,
    options: KnetOptions,
) -> Result<(KnetModel, Vec<f64>)> {
    let available = if options.include_self {
        embeddings.len()
    } else {
        embeddings.len() - 1
    };
    mode.validate(available)?;
    let k_max = mode.k_max();
    let mut model = init_knet(
        embeddings.dim(),
        embeddings.num_labels(),
        k_max,
        options.include_self,
        cfg,
    )?;
    let index = KnnIndex::new(embeddings.clone(), options.metric)?;
    let table = index.neighbor_table(k_max, options.include_self)?;
    let vectors = embeddings.vectors();
    let num_labels = embeddings.num_labels();
    let history = fit(&mut model.net, embeddings.len(), cfg, |ids, rng| {
        let k = match mode {
            KTrainMode::RandomK { k_min, k_max } => rng.random_range(k_min..=k_max),
            KTrainMode::FixedK(k) => k,
        };
        let inputs = vectors
            .select_rows(ids)
            .with_constant_column(k as f64 / k_max as f64);
        let mut targets = Matrix::zeros(ids.len(), num_labels);
        for (r, &i) in ids.iter().enumerate() {
            targets
                .row_mut(r)
                .copy_from_slice(table.vote(i, k)?.probs());
        }
        Batch::new(inputs, targets)
    })?;
    Ok((model, history))
}

/// Inference-mode prediction of the kNN vote for one embedding.
pub fn knet_predict(model: &KnetModel, embedding: &[f64], k: usize) -> Result<VoteVector> {
    let row = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
    let out = model.predict_batch(&row, k)?;
    VoteVector::new(out.into_vec())
}

pub fn knet_to_string(model: &KnetModel) -> String {
    format!(
        "{KNET_MAGIC} d={} L={} kmax={} self={}\n{}",
        model.spec.dim,
        model.spec.num_labels,
        model.k_max,
        u8::from(model.include_self),
        write_dense_net(&model.net)
    )
}

pub fn parse_knet(text: &str) -> Result<KnetModel> {
    let (header, rest) = text.split_once('\n').unwrap_or((text, ""));
    let mut tokens = header.split_whitespace();
    if [tokens.next(), tokens.next()] != [Some("KNET"), Some("v1")] {
        return Err(Error::parse(
            1,
            format!("expected `{KNET_MAGIC}` header, found `{header}`"),
        ));
    }
    let mut field = |key: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.strip_prefix(key))
            .and_then(|t| t.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(1, format!("header is missing `{key}=<int>`")))
    };
    let dim = field("d")?;
    let num_labels = field("L")?;
    let k_max = field("kmax")?;
    let include_self = match field("self")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::parse(
                1,
                format!("self flag must be 0 or 1, found {other}"),
            ))
        }
    };
    let net = read_dense_net(rest, 1)?;
    KnetModel::new(KnetSpec::new(dim, num_labels)?, net, k_max, include_self)
}

pub fn save_knet(model: &KnetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, knet_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_knet(path: impl AsRef<Path>) -> Result<KnetModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_knet(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::build_index;

    // 257*16 + 16 + 2*16 + 16*10 + 10 = 4,330 for d=256
    #[test]
    fn closed_form_parameter_counts() {
        let count = |d: usize, l: usize| {
            let h = (d / 16).max(1);
            (d + 1) * h + h + 2 * h + h * l + l
        };
        for (d, l, expected) in [
            (256, 10, 4_330),
            (8, 3, 18),
            (64, 10, 322),
            (512, 10, 16_842),
        ] {
            let model = build_knet(d, l).unwrap();
            assert_eq!(model.param_count(), expected);
            assert_eq!(count(d, l), expected);
        }
        assert!(matches!(build_knet(0, 3), Err(Error::Range(_))));
    }

    #[test]
    fn stack_tokens() {
        let model = build_knet(256, 10).unwrap();
        assert_eq!(
            crate::nn::spec_tokens(model.net().spec()),
            "FC 257 16 RELU BN 16 FC 16 10 SOFTMAX"
        );
    }

    fn line_index() -> KnnIndex {
        let rows: Vec<[f64; 1]> = (0..6).map(|i| [i as f64]).collect();
        let set = EmbeddingSet::from_rows(&rows, vec![2, 2, 0, 2, 1, 1], 3).unwrap();
        build_index(set).unwrap()
    }

    #[test]
    fn target_examples() {
        let idx = line_index();
        assert_eq!(
            make_target(&idx, 4, 1, true).unwrap(),
            VoteVector::one_hot(1, 3)
        );
        let all = make_target(&idx, 0, 6, true).unwrap();
        let hist = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in all.probs().iter().zip(hist) {
            assert!((a - b).abs() < 1e-15);
        }
        // 5 nearest of sample 1: ids 1, 0, 2, 3, 4 with labels 2, 2, 0, 2, 1
        let five = make_target(&idx, 1, 5, true).unwrap();
        assert_eq!(five.probs(), &[0.2, 0.2, 0.6]);
        assert!(matches!(
            make_target(&idx, 0, 7, true),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            make_target(&idx, 0, 6, false),
            Err(Error::Range(_))
        ));
        // without self, ids 3 and 5 tie at distance 1 and the lower id wins
        assert_eq!(
            make_target(&idx, 4, 1, false).unwrap(),
            VoteVector::one_hot(2, 3)
        );
    }

    #[test]
    fn untrained_outputs_are_distributions() {
        let model = build_knet(8, 3).unwrap();
        let x = [0.3, 0.0, 1.2, 0.4, 0.0, 0.0, 2.0, 0.1];
        let a = knet_predict(&model, &x, 19).unwrap();
        let b = knet_predict(&model, &x, 19).unwrap();
        assert_eq!(a, b);
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            knet_predict(&model, &x[..3], 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mode_validation() {
        assert!(KTrainMode::default().validate(101).is_ok());
        assert!(KTrainMode::default().validate(100).is_err());
        assert!(KTrainMode::FixedK(0).validate(10).is_err());
        assert!(KTrainMode::RandomK { k_min: 5, k_max: 4 }
            .validate(10)
            .is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let model = init_knet(8, 3, 51, false, &TrainConfig::default()).unwrap();
        let text = knet_to_string(&model);
        assert!(text.starts_with(
            "KNET v1 d=8 L=3 kmax=51 self=0\nDENSENET v1\nFC 9 1 RELU BN 1 FC 1 3 SOFTMAX\n"
        ));
        assert_eq!(parse_knet(&text).unwrap(), model);
        let broken = text.replace("kmax=51", "kmax=x");
        assert!(matches!(
            parse_knet(&broken),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
