use rand::seq::SliceRandom;

use super::{DenseNet, LayerSpec, Loss, Mode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, seeded, SeededRng};

/// Tolerance on target row sums.
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub weight_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            loss: Loss::CrossEntropy,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            weight_init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.learning_rate.is_infinite()
        {
            return Err(Error::range("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::range("batch_size must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::range("bn_momentum must lie in (0, 1)"));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 {
            return Err(Error::range("bn_epsilon must be positive"));
        }
        if self.weight_init_scale.is_nan() || self.weight_init_scale <= 0.0 {
            return Err(Error::range("weight_init_scale must be positive"));
        }
        Ok(())
    }

    /// Fresh network for `spec` initialized from this config's seed.
    pub fn init_net(&self, spec: Vec<LayerSpec>) -> Result<DenseNet> {
        self.validate()?;
        DenseNet::new(
            spec,
            self.weight_init_scale,
            self.bn_momentum,
            self.bn_epsilon,
            derive_seed(self.seed, 0x1417),
        )
    }
}

/// Inputs paired with target distributions (one-hot rows or vote vectors).
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::shape(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        for (i, row) in targets.iter_rows().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Validation(format!(
                    "target row {i} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!("target row {i} sums to {sum}")));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Mini-batch SGD over `n_samples` shuffled sample ids.
///
/// Each epoch reshuffles the ids from the seeded stream and asks `make_batch`
/// for the batch of every chunk; `make_batch` receives the same stream so any
/// extra randomness it draws stays reproducible. A trailing single-sample
/// chunk is skipped when the network contains batch norm. Returns the mean
/// training loss of every epoch.
pub fn fit<F>(
    net: &mut DenseNet,
    n_samples: usize,
    cfg: &TrainConfig,
    mut make_batch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[usize], &mut SeededRng) -> Result<Batch>,
{
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    let fused = matches!(net.spec().last(), Some(LayerSpec::Softmax));
    let has_bn = net.has_batch_norm();
    let mut rng = seeded(derive_seed(cfg.seed, 0x5A1E));
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    net.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if has_bn && chunk.len() < 2 {
                continue;
            }
            let batch = make_batch(chunk, &mut rng)?;
            let (pred, tape) = net.forward(&batch.inputs)?;
            if pred.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite prediction in epoch {epoch}"
                )));
            }
            let loss = cfg.loss.evaluate(&pred, &batch.targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss} in epoch {epoch}"
                )));
            }
            let grads = if fused {
                net.backward_fused(&tape, &batch.targets)?
            } else {
                let g = super::loss_grad(&pred, &batch.targets)?;
                net.backward(&tape, &g)?
            };
            net.sgd_step(&grads, cfg.learning_rate)?;
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        history.push(if seen == 0 { 0.0 } else { total / seen as f64 });
    }
    if net.flat_params().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("parameters diverged".into()));
    }
    net.set_mode(Mode::Infer);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(labels: &[usize], l: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), l);
        for (i, &c) in labels.iter().enumerate() {
            m.set(i, c, 1.0);
        }
        m
    }

    #[test]
    fn batch_rejects_non_distribution_targets() {
        let x = Matrix::zeros(1, 2);
        assert!(Batch::new(x.clone(), Matrix::from_rows(&[[0.5, 0.4]]).unwrap()).is_err());
        assert!(Batch::new(x.clone(), Matrix::from_rows(&[[1.5, -0.5]]).unwrap()).is_err());
        assert!(Batch::new(x, Matrix::from_rows(&[[0.5, 0.5]]).unwrap()).is_ok());
    }

    #[test]
    fn divergence_is_a_numeric_error() {
        let inputs = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [-1.0, 0.0]]).unwrap();
        let targets = one_hot(&[0, 1, 1], 2);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            batch_size: 3,
            epochs: 20,
            ..TrainConfig::default()
        };
        let mut net = cfg
            .init_net(vec![
                LayerSpec::FullyConnected {
                    in_dim: 2,
                    out_dim: 4,
                },
                LayerSpec::Relu,
                LayerSpec::FullyConnected {
                    in_dim: 4,
                    out_dim: 2,
                },
                LayerSpec::Softmax,
            ])
            .unwrap();
        let err = fit(&mut net, 3, &cfg, |ids, _| {
            Batch::new(inputs.select_rows(ids), targets.select_rows(ids))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.bn_momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let xs: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                if i % 2 == 0 {
                    [t, 1.0 - t]
                } else {
                    [-t, t - 1.0]
                }
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let inputs = Matrix::from_rows(&xs).unwrap();
        let targets = one_hot(&labels, 2);
        let spec = vec![
            LayerSpec::FullyConnected {
                in_dim: 2,
                out_dim: 4,
            },
            LayerSpec::Relu,
            LayerSpec::BatchNorm { dim: 4 },
            LayerSpec::FullyConnected {
                in_dim: 4,
                out_dim: 2,
            },
            LayerSpec::Softmax,
        ];
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = cfg.init_net(spec.clone()).unwrap();
            let hist = fit(&mut net, 40, &cfg, |ids, _| {
                Batch::new(inputs.select_rows(ids), targets.select_rows(ids))
            })
            .unwrap();
            (net, hist)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.last().unwrap() < ha.first().unwrap());
    }
}
