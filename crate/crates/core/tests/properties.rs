use knet_core::data::{
    dataset_to_string, default_toy_specs, gen_toy, parse_dataset, LabeledDataset, Provenance,
};
use knet_core::eval::{format_count, scatter_pixmap, BBox, LabelGrid, MemoryReport};
use knet_core::knet::{build_knet, knet_to_string, parse_knet, KnetSpec};
use knet_core::nn::{
    entropy, loss_ce, loss_kl, read_dense_net, spec_tokens, write_dense_net, DenseNet, LayerSpec,
};
use knet_core::noise::{
    apply_noise, make_cyclic_asym, make_random_asym, make_semantic, make_uniform, parse_tm,
    tm_to_string, TransitionMatrix,
};
use knet_core::Matrix;
use proptest::prelude::*;

fn labels_only(per_class: usize, num_labels: usize) -> LabeledDataset {
    let labels: Vec<usize> = (0..num_labels)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    LabeledDataset::new(
        Matrix::zeros(labels.len(), 1),
        labels,
        num_labels,
        Provenance::Clean,
    )
    .unwrap()
}

fn binomial_z(observed: usize, trials: usize, p: f64) -> f64 {
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    if sigma == 0.0 {
        return if observed as f64 == mean {
            0.0
        } else {
            f64::INFINITY
        };
    }
    (observed as f64 - mean).abs() / sigma
}

/// Flip rates per class and overall stay within 3 sigma; single cells within 4.
fn assert_matches_matrix(tm: &TransitionMatrix, per_class: usize, seed: u64) {
    let l = tm.num_labels();
    let ds = labels_only(per_class, l);
    let (noisy, record) = apply_noise(&ds, tm, seed).unwrap();
    assert_eq!(noisy.vectors(), ds.vectors());
    let counts = record.transition_counts(l);
    let mut expected_flips = 0.0;
    for (c, row) in counts.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), per_class);
        let stay = tm.get(c, c);
        expected_flips += per_class as f64 * (1.0 - stay);
        let z = binomial_z(per_class - row[c], per_class, 1.0 - stay);
        assert!(z <= 3.0, "class {c} flip rate is {z:.2} sigma off");
        for (j, &n) in row.iter().enumerate() {
            let z = binomial_z(n, per_class, tm.get(c, j));
            assert!(z <= 4.0, "{c}->{j}: {n} is {z:.2} sigma off");
        }
    }
    let total = per_class * l;
    let z = binomial_z(record.flip_count(), total, expected_flips / total as f64);
    assert!(z <= 3.0, "overall flip count is {z:.2} sigma off");
}

#[test]
fn noise_frequencies_match_the_matrix() {
    assert_matches_matrix(&make_uniform(0.3, 3).unwrap(), 20_000, 1);
    assert_matches_matrix(&make_uniform(0.5, 10).unwrap(), 5_000, 2);
    assert_matches_matrix(&make_cyclic_asym(0.3, 3).unwrap(), 20_000, 3);
    assert_matches_matrix(&make_random_asym(0.4, 6, 11).unwrap(), 10_000, 4);
    assert_matches_matrix(
        &make_semantic(&[(0, 1), (2, 3)], 0.4, 4).unwrap(),
        10_000,
        5,
    );
}

#[test]
fn cyclic_matrix_is_the_toy_pattern() {
    let tm = make_cyclic_asym(0.3, 3).unwrap();
    for c in 0..3 {
        assert!((tm.get(c, c) - 0.7).abs() < 1e-12);
        assert!((tm.get(c, (c + 1) % 3) - 0.2).abs() < 1e-12);
        assert!((tm.get(c, (c + 2) % 3) - 0.1).abs() < 1e-12);
    }
}

#[test]
fn uniform_rows_share_their_off_diagonal_mass() {
    let tm = make_uniform(0.25, 5).unwrap();
    let off = tm.get(0, 1);
    for c in 0..5 {
        for j in 0..5 {
            let want = if c == j { 1.0 - 0.25 + 0.05 } else { off };
            assert!((tm.get(c, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_rate_changes_nothing() {
    let ds = gen_toy(50, 3, &default_toy_specs()).unwrap();
    for tm in [
        make_uniform(0.0, 3).unwrap(),
        make_cyclic_asym(0.0, 3).unwrap(),
    ] {
        let (noisy, record) = apply_noise(&ds, &tm, 9).unwrap();
        assert_eq!(noisy.labels(), ds.labels());
        assert_eq!(record.flip_count(), 0);
    }
}

#[test]
fn seeded_stages_are_deterministic() {
    let specs = default_toy_specs();
    assert_eq!(
        gen_toy(100, 5, &specs).unwrap(),
        gen_toy(100, 5, &specs).unwrap()
    );
    assert_ne!(
        gen_toy(100, 5, &specs).unwrap(),
        gen_toy(100, 6, &specs).unwrap()
    );
    let ds = gen_toy(100, 5, &specs).unwrap();
    let tm = make_cyclic_asym(0.3, 3).unwrap();
    assert_eq!(
        apply_noise(&ds, &tm, 1).unwrap(),
        apply_noise(&ds, &tm, 1).unwrap()
    );
    assert_eq!(
        make_random_asym(0.3, 10, 4).unwrap(),
        make_random_asym(0.3, 10, 4).unwrap()
    );
}

#[test]
fn knet_architecture_tokens_and_counts() {
    let spec = KnetSpec::new(256, 10).unwrap();
    assert_eq!(
        spec_tokens(&spec.layers()),
        "FC 257 16 RELU BN 16 FC 16 10 SOFTMAX"
    );
    for (d, l, want) in [
        (8, 3, 18),
        (64, 10, 322),
        (256, 10, 4_330),
        (512, 10, 16_842),
    ] {
        let h = (d / 16).max(1);
        let closed = (d + 1) * h + h + 2 * h + h * l + l;
        assert_eq!(closed, want);
        assert_eq!(KnetSpec::new(d, l).unwrap().param_count(), want, "d={d}");
        assert_eq!(build_knet(d, l).unwrap().param_count(), want);
    }
}

#[test]
fn memory_counts() {
    let report = MemoryReport::from_counts(50_000, 256, 4_330, 0);
    assert_eq!(report.knn_values, 12_800_000);
    assert_eq!(format_count(report.knn_values), "12.8M");
    assert_eq!(
        MemoryReport::from_counts(3_000, 8, 18, 211).knn_values,
        24_000
    );
}

#[test]
fn rasters_put_ymax_on_top() {
    // two rows: row 0 is the low-y band
    let grid = LabelGrid {
        width: 1,
        height: 2,
        labels: vec![0, 1],
    };
    let px = grid.to_pixmap(2);
    assert_eq!(px.pixels[0], knet_core::eval::class_color(1, 2));
    assert_eq!(px.pixels[1], knet_core::eval::class_color(0, 2));

    let bbox = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let ds = LabeledDataset::new(
        Matrix::from_rows(&[[0.5, 0.95]]).unwrap(),
        vec![0],
        1,
        Provenance::Clean,
    )
    .unwrap();
    let px = scatter_pixmap(&ds, bbox, 10, 10).unwrap();
    let dot = knet_core::eval::class_color(0, 1);
    assert_eq!(px.pixels[5], dot, "a high-y sample lands in the top row");
    assert_ne!(px.pixels[9 * 10 + 5], dot);
}

#[test]
fn model_text_round_trips() {
    let mut model = build_knet(8, 3).unwrap();
    assert_eq!(parse_knet(&knet_to_string(&model)).unwrap(), model);
    let net = DenseNet::new(
        vec![
            LayerSpec::FullyConnected {
                in_dim: 3,
                out_dim: 4,
            },
            LayerSpec::BatchNorm { dim: 4 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                in_dim: 4,
                out_dim: 2,
            },
            LayerSpec::Softmax,
        ],
        0.7,
        0.8,
        1e-4,
        42,
    )
    .unwrap();
    let text = write_dense_net(&net);
    let back = read_dense_net(&text, 0).unwrap();
    assert_eq!(back.flat_params(), net.flat_params());
    assert_eq!(back.bn_state(), net.bn_state());
    assert_eq!(write_dense_net(&back), text);
    model = parse_knet(&knet_to_string(&model)).unwrap();
    assert_eq!(
        knet_to_string(&model),
        knet_to_string(&build_knet(8, 3).unwrap())
    );
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-3;
        v.iter().map(|x| (x + 1e-3 / v.len() as f64) / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_ce_minus_entropy(p in distribution(5), t in distribution(5)) {
        let p = Matrix::from_rows(&[p]).unwrap();
        let t = Matrix::from_rows(&[t]).unwrap();
        let kl = loss_kl(&p, &t).unwrap();
        let ce = loss_ce(&p, &t).unwrap();
        prop_assert!((kl - (ce - entropy(&t))).abs() < 1e-10);
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn datasets_round_trip_through_text(
        rows in proptest::collection::vec((-1e6f64..1e6, -1e-6f64..1e-6, 0usize..4), 1..30)
    ) {
        let vectors: Vec<[f64; 2]> = rows.iter().map(|(a, b, _)| [*a, *b]).collect();
        let labels = rows.iter().map(|r| r.2).collect();
        let ds = LabeledDataset::new(Matrix::from_rows(&vectors).unwrap(), labels, 4, Provenance::Clean).unwrap();
        let back = parse_dataset(&dataset_to_string(&ds), Provenance::Clean).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn transition_matrices_round_trip(rate in 0.0f64..=1.0, l in 2usize..8, seed in any::<u64>()) {
        for tm in [make_uniform(rate, l).unwrap(), make_random_asym(rate, l.max(3), seed).unwrap()] {
            let back = parse_tm(&tm_to_string(&tm)).unwrap();
            for (a, b) in back.rows().iter().zip(tm.rows()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
