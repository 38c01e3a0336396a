use std::collections::HashSet;

use knet_core::nn::check::{gradient_check, random_gradient_case, GradientCase, GradientPath};
use knet_core::nn::{DenseNet, LayerParams, LayerSpec, Loss, Mode};
use knet_core::Matrix;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn random_small_nets_match_finite_differences() {
    let mut kinds = HashSet::new();
    let mut losses = HashSet::new();
    let mut worst: f64 = 0.0;
    for seed in 0..150u64 {
        let case = random_gradient_case(seed).unwrap();
        for layer in case.net.spec() {
            kinds.insert(std::mem::discriminant(layer));
        }
        losses.insert(case.loss);
        for path in [GradientPath::Fused, GradientPath::Jacobian] {
            let report = gradient_check(&case, H, path).unwrap();
            assert!(report.checked > 0);
            assert!(
                report.max_rel_error < TOL,
                "seed {seed} {path:?} {:?}: rel err {}",
                case.net.spec(),
                report.max_rel_error
            );
            worst = worst.max(report.max_rel_error);
        }
    }
    assert_eq!(kinds.len(), 4, "every layer kind appears");
    assert_eq!(losses.len(), 2, "both losses appear");
    assert!(worst.is_finite());
}

#[test]
fn single_fc_two_class_net() {
    let spec = vec![
        LayerSpec::FullyConnected {
            in_dim: 1,
            out_dim: 2,
        },
        LayerSpec::Softmax,
    ];
    let params = vec![
        LayerParams::Dense {
            weights: vec![2.0, 0.0],
            bias: vec![0.0, 0.0],
        },
        LayerParams::None,
    ];
    let mut net = DenseNet::from_parts(spec, params, vec![None, None]).unwrap();
    net.set_mode(Mode::Train);
    let case = GradientCase {
        net,
        inputs: Matrix::from_rows(&[[3.0]]).unwrap(),
        targets: Matrix::from_rows(&[[0.0, 1.0]]).unwrap(),
        loss: Loss::CrossEntropy,
    };
    for path in [GradientPath::Fused, GradientPath::Jacobian] {
        let report = gradient_check(&case, H, path).unwrap();
        assert_eq!(report.checked, 4);
        assert!(
            report.max_rel_error < TOL,
            "{path:?}: {}",
            report.max_rel_error
        );
    }
    // d/dw0 of -ln softmax_1 at logits (6, 0) is 3 * p0
    let mut net = case.net.clone();
    let (_, tape) = net.forward(&case.inputs).unwrap();
    let g = net.backward_fused(&tape, &case.targets).unwrap().flat();
    let p0 = 6f64.exp() / (6f64.exp() + 1.0);
    assert!((g[0] - 3.0 * p0).abs() < 1e-12);
    assert!((g[1] + 3.0 * p0).abs() < 1e-12);
}
