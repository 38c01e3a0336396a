//! Central finite-difference verification of the analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{loss_grad, DenseNet, LayerCache, LayerSpec, Loss, Mode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

/// Smallest distance of any ReLU input to the kink; finite differences that
/// straddle a kink do not measure the derivative.
const KINK_MARGIN: f64 = 1e-3;

/// A network, a batch and a loss to differentiate.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub net: DenseNet,
    pub inputs: Matrix,
    pub targets: Matrix,
    pub loss: Loss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over all parameters.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Which backward path produced the analytic gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientPath {
    /// `(p - t) / B` seeded at the logits.
    Fused,
    /// Loss gradient pushed through the softmax Jacobian.
    Jacobian,
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random small softmax network: 1 to 3 FC layers, widths 1..=8, with ReLU
/// and batch norm sprinkled between them, slightly perturbed parameters, a
/// batch of 3..=6 rows and random target distributions.
///
/// The batch is redrawn until every ReLU input keeps clear of zero.
pub fn random_gradient_case(seed: u64) -> Result<GradientCase> {
    let mut rng = seeded(seed);
    let n_fc = rng.random_range(1..=3usize);
    let mut dims: Vec<usize> = (0..=n_fc).map(|_| rng.random_range(1..=8usize)).collect();
    dims[n_fc] = rng.random_range(2..=8usize);
    let mut spec = Vec::new();
    for i in 0..n_fc {
        spec.push(LayerSpec::FullyConnected {
            in_dim: dims[i],
            out_dim: dims[i + 1],
        });
        if i + 1 < n_fc {
            let mut extras = match rng.random_range(0..4u8) {
                0 => vec![],
                1 => vec![LayerSpec::Relu],
                2 => vec![LayerSpec::BatchNorm { dim: dims[i + 1] }],
                _ => vec![LayerSpec::Relu, LayerSpec::BatchNorm { dim: dims[i + 1] }],
            };
            extras.shuffle(&mut rng);
            spec.extend(extras);
        }
    }
    if n_fc == 1 && rng.random_bool(0.5) {
        // a lone FC layer still gets a normalized head sometimes
        spec.push(LayerSpec::BatchNorm { dim: dims[1] });
    }
    spec.push(LayerSpec::Softmax);

    let mut net = DenseNet::new(spec, 1.0, 0.9, 1e-5, rng.random())?;
    for layer in net.params_mut() {
        for t in layer.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.3 * normal(&mut rng);
            }
        }
    }
    net.set_mode(Mode::Train);
    let loss = if rng.random_bool(0.5) {
        Loss::CrossEntropy
    } else {
        Loss::KlDivergence
    };
    let batch = rng.random_range(3..=6usize);
    let labels = net.output_dim();
    for _ in 0..1000 {
        let inputs = Matrix::from_vec(
            batch,
            dims[0],
            (0..batch * dims[0]).map(|_| normal(&mut rng)).collect(),
        )?;
        if relu_margin(&net, &inputs)? < KINK_MARGIN {
            continue;
        }
        let mut targets = Matrix::zeros(batch, labels);
        for r in 0..batch {
            let row: Vec<f64> = (0..labels).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.into_iter().enumerate() {
                targets.set(r, c, v / s);
            }
        }
        return Ok(GradientCase {
            net,
            inputs,
            targets,
            loss,
        });
    }
    Err(Error::Numeric("no batch clears the ReLU kinks".into()))
}

fn relu_margin(net: &DenseNet, inputs: &Matrix) -> Result<f64> {
    let mut probe = net.clone();
    probe.set_mode(Mode::Train);
    let (_, tape) = probe.forward(inputs)?;
    Ok(tape
        .caches
        .iter()
        .filter_map(|c| match c {
            LayerCache::Relu { input } => Some(
                input
                    .as_slice()
                    .iter()
                    .fold(f64::INFINITY, |m, v| m.min(v.abs())),
            ),
            _ => None,
        })
        .fold(f64::INFINITY, f64::min))
}

fn train_loss(case: &GradientCase, net: &DenseNet) -> Result<f64> {
    let mut probe = net.clone();
    probe.set_mode(Mode::Train);
    let (pred, _) = probe.forward(&case.inputs)?;
    case.loss.evaluate(&pred, &case.targets)
}

/// Compares analytic parameter gradients with central differences of step `h`.
pub fn gradient_check(case: &GradientCase, h: f64, path: GradientPath) -> Result<GradientReport> {
    let mut net = case.net.clone();
    net.set_mode(Mode::Train);
    let (pred, tape) = net.clone().forward(&case.inputs)?;
    let analytic = match path {
        GradientPath::Fused => net.backward_fused(&tape, &case.targets)?,
        GradientPath::Jacobian => net.backward(&tape, &loss_grad(&pred, &case.targets)?)?,
    }
    .flat();

    let mut max_rel_error: f64 = 0.0;
    let mut idx = 0;
    for layer in 0..net.params().len() {
        let n_tensors = net.params()[layer].tensors().len();
        for t in 0..n_tensors {
            let len = net.params()[layer].tensors()[t].len();
            for j in 0..len {
                let original = net.params()[layer].tensors()[t][j];
                net.params_mut()[layer].tensors_mut()[t][j] = original + h;
                let up = train_loss(case, &net)?;
                net.params_mut()[layer].tensors_mut()[t][j] = original - h;
                let down = train_loss(case, &net)?;
                net.params_mut()[layer].tensors_mut()[t][j] = original;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                max_rel_error = max_rel_error.max(rel);
                idx += 1;
            }
        }
    }
    Ok(GradientReport {
        max_rel_error,
        checked: idx,
    })
}
