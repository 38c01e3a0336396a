//! The preliminary classifier trained on noisy labels, and extraction of its
//! penultimate-layer representation.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knn::EmbeddingSet;
use crate::matrix::Matrix;
use crate::nn::{fit, Batch, DenseNet, LayerSpec, TrainConfig};

/// Fully connected classifier shape: `input -> hidden... -> labels`, ReLU
/// after every hidden layer and a softmax head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrelimSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_labels: usize,
}

impl PrelimSpec {
    /// `FC(2,16) ReLU FC(16,8) ReLU FC(8,3) Softmax`.
    pub fn toy_default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![16, 8],
            num_labels: 3,
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.hidden.is_empty() {
            return Err(Error::Validation(
                "preliminary network needs a hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.num_labels == 0 || self.hidden.contains(&0) {
            return Err(Error::range(
                "preliminary network dimensions must be positive",
            ));
        }
        let mut layers = Vec::with_capacity(2 * self.hidden.len() + 2);
        let mut width = self.input_dim;
        for &h in &self.hidden {
            layers.push(LayerSpec::FullyConnected {
                in_dim: width,
                out_dim: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::FullyConnected {
            in_dim: width,
            out_dim: self.num_labels,
        });
        layers.push(LayerSpec::Softmax);
        Ok(layers)
    }
}

/// Trains the classifier with one-hot cross-entropy on the (noisy) labels.
/// Returns the network in inference mode.
pub fn train_prelim(
    train: &LabeledDataset,
    spec: &PrelimSpec,
    cfg: &TrainConfig,
) -> Result<DenseNet> {
    train_prelim_with_history(train, spec, cfg).map(|(net, _)| net)
}

/// [`train_prelim`] plus the mean training loss of every epoch.
pub fn train_prelim_with_history(
    train: &LabeledDataset,
    spec: &PrelimSpec,
    cfg: &TrainConfig,
) -> Result<(DenseNet, Vec<f64>)> {
    if train.dim() != spec.input_dim {
        return Err(Error::shape(format!(
            "dataset width {} does not match network input {}",
            train.dim(),
            spec.input_dim
        )));
    }
    if train.num_labels() != spec.num_labels {
        return Err(Error::shape(format!(
            "dataset has L={} but the network predicts {} labels",
            train.num_labels(),
            spec.num_labels
        )));
    }
    let mut net = cfg.init_net(spec.layers()?)?;
    let inputs = train.vectors();
    let targets = train.one_hot_targets();
    let history = fit(&mut net, train.len(), cfg, |ids, _| {
        Batch::new(inputs.select_rows(ids), targets.select_rows(ids))
    })?;
    Ok((net, history))
}

/// Number of leading layers that produce the penultimate representation:
/// everything before the final fully connected layer.
pub fn penultimate_depth(net: &DenseNet) -> Result<usize> {
    net.spec()
        .iter()
        .rposition(|l| matches!(l, LayerSpec::FullyConnected { .. }))
        .filter(|&i| i > 0)
        .ok_or_else(|| Error::shape("network has no hidden layer before its final FC layer"))
}

/// Activations entering the final FC layer, in inference mode.
pub fn penultimate_features(net: &DenseNet, inputs: &Matrix) -> Result<Matrix> {
    net.predict_prefix(inputs, penultimate_depth(net)?)
}

/// Penultimate-layer embeddings of `ds`, paired with its labels.
pub fn extract_penultimate(net: &DenseNet, ds: &LabeledDataset) -> Result<EmbeddingSet> {
    let features = penultimate_features(net, ds.vectors())?;
    EmbeddingSet::new(features, ds.labels().to_vec(), ds.num_labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_toy_specs, gen_toy};

    #[test]
    fn layer_stack_of_the_toy_default() {
        let layers = PrelimSpec::toy_default().layers().unwrap();
        assert_eq!(
            crate::nn::spec_tokens(&layers),
            "FC 2 16 RELU FC 16 8 RELU FC 8 3 SOFTMAX"
        );
        let no_hidden = PrelimSpec {
            input_dim: 2,
            hidden: vec![],
            num_labels: 3,
        };
        assert!(no_hidden.layers().is_err());
    }

    #[test]
    fn zero_epochs_returns_the_initialized_net() {
        let ds = gen_toy(10, 1, &default_toy_specs()).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let net = train_prelim(&ds, &PrelimSpec::toy_default(), &cfg).unwrap();
        let fresh = cfg
            .init_net(PrelimSpec::toy_default().layers().unwrap())
            .unwrap();
        assert_eq!(net.flat_params(), fresh.flat_params());
    }

    #[test]
    fn embeddings_have_last_hidden_width() {
        let ds = gen_toy(20, 1, &default_toy_specs()).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let net = train_prelim(&ds, &PrelimSpec::toy_default(), &cfg).unwrap();
        let a = extract_penultimate(&net, &ds).unwrap();
        let b = extract_penultimate(&net, &ds).unwrap();
        assert_eq!(a.dim(), 8);
        assert_eq!(a, b);
        let one = ds.subset(&[4]).unwrap();
        assert_eq!(extract_penultimate(&net, &one).unwrap().len(), 1);
    }

    #[test]
    fn incompatible_inputs_are_shape_errors() {
        let ds = gen_toy(5, 1, &default_toy_specs()).unwrap();
        let spec = PrelimSpec {
            input_dim: 3,
            ..PrelimSpec::toy_default()
        };
        assert!(matches!(
            train_prelim(&ds, &spec, &TrainConfig::default()),
            Err(Error::Shape(_))
        ));
        let head_only = DenseNet::new(
            vec![
                LayerSpec::FullyConnected {
                    in_dim: 2,
                    out_dim: 3,
                },
                LayerSpec::Softmax,
            ],
            1.0,
            0.9,
            1e-5,
            0,
        )
        .unwrap();
        assert!(matches!(
            extract_penultimate(&head_only, &ds),
            Err(Error::Shape(_))
        ));
    }
}
