use knet_core::knet::make_target;
use knet_core::knn::{brute_force_neighbors, vote_pdf, EmbeddingSet, KnnIndex, Metric};
use knet_core::rng::seeded;
use knet_core::Matrix;
use proptest::prelude::*;
use rand::Rng;

/// Integer coordinates in a small box, so equal distances are common.
fn tied_set(rng: &mut impl Rng, n: usize, d: usize, labels: usize) -> EmbeddingSet {
    let data = (0..n * d).map(|_| rng.random_range(0..4) as f64).collect();
    let ys = (0..n).map(|_| rng.random_range(0..labels)).collect();
    EmbeddingSet::new(Matrix::from_vec(n, d, data).unwrap(), ys, labels).unwrap()
}

#[test]
fn index_matches_brute_force_on_tied_data() {
    let mut rng = seeded(2024);
    let mut ties_seen = 0;
    for instance in 0..1000 {
        let n = rng.random_range(1..40usize);
        let d = rng.random_range(1..4usize);
        let labels = rng.random_range(1..5usize);
        let set = tied_set(&mut rng, n, d, labels);
        let metric = if instance % 2 == 0 {
            Metric::L1
        } else {
            Metric::L2
        };
        let index = KnnIndex::new(set.clone(), metric).unwrap();
        let query: Vec<f64> = (0..d).map(|_| rng.random_range(0..4) as f64).collect();
        let k = rng.random_range(1..=n);
        let got = index.query(&query, k).unwrap();
        let want = brute_force_neighbors(&set, &query, k, metric);
        assert_eq!(got, want, "instance {instance}");

        let dists: Vec<f64> = (0..n)
            .map(|i| metric.distance(&query, set.vectors().row(i)))
            .collect();
        let boundary = dists[*got.last().unwrap()];
        if k < n && dists.iter().filter(|&&x| x == boundary).count() > 1 {
            ties_seen += 1;
        }

        let expected_pdf = vote_pdf(&index.labels_of(&want), labels).unwrap();
        assert_eq!(index.pdf(&query, k).unwrap(), expected_pdf);
    }
    assert!(
        ties_seen > 100,
        "only {ties_seen} instances had ties at the cut"
    );
}

#[test]
fn exclusion_and_neighbor_table_agree_with_brute_force() {
    let mut rng = seeded(7);
    for _ in 0..200 {
        let n = rng.random_range(3..30usize);
        let set = tied_set(&mut rng, n, 2, 3);
        let index = KnnIndex::new(set.clone(), Metric::L1).unwrap();
        let table_in = index.neighbor_table(n - 1, true).unwrap();
        let table_ex = index.neighbor_table(n - 1, false).unwrap();
        for i in 0..n {
            let q = set.vectors().row(i);
            let k = rng.random_range(1..n);
            let excl = index.query_excluding(q, k, i).unwrap();
            let want: Vec<usize> = brute_force_neighbors(&set, q, n, Metric::L1)
                .into_iter()
                .filter(|&j| j != i)
                .take(k)
                .collect();
            assert_eq!(excl, want);
            assert_eq!(
                table_in.vote(i, k).unwrap(),
                make_target(&index, i, k, true).unwrap()
            );
            assert_eq!(
                table_ex.vote(i, k).unwrap(),
                make_target(&index, i, k, false).unwrap()
            );
        }
    }
}

#[test]
fn batch_pdfs_equal_single_queries() {
    let mut rng = seeded(99);
    let set = tied_set(&mut rng, 50, 3, 4);
    let index = KnnIndex::new(set, Metric::L2).unwrap();
    let queries =
        Matrix::from_vec(20, 3, (0..60).map(|_| rng.random_range(0.0..4.0)).collect()).unwrap();
    let batch = index.pdf_batch(&queries, 7).unwrap();
    for (r, q) in queries.iter_rows().enumerate() {
        assert_eq!(batch.row(r), index.pdf(q, 7).unwrap().probs());
    }
}

#[test]
fn identical_points_resolve_by_id() {
    let set = EmbeddingSet::from_rows(&[[1.0, 1.0]; 6], vec![2, 0, 1, 0, 2, 1], 3).unwrap();
    let index = KnnIndex::new(set, Metric::L1).unwrap();
    assert_eq!(index.query(&[1.0, 1.0], 4).unwrap(), vec![0, 1, 2, 3]);
    assert_eq!(
        index.query_excluding(&[1.0, 1.0], 2, 0).unwrap(),
        vec![1, 2]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn votes_are_multiples_of_one_over_k(seed in any::<u64>(), k in 1usize..20) {
        let mut rng = seeded(seed);
        let set = tied_set(&mut rng, 20, 2, 3);
        let index = KnnIndex::new(set, Metric::L1).unwrap();
        let q = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
        let pdf = index.pdf(&q, k).unwrap();
        let sum: f64 = pdf.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for &p in pdf.probs() {
            let m = p * k as f64;
            prop_assert!((m - m.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn neighbor_lists_grow_by_prefix(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let set = tied_set(&mut rng, 25, 3, 2);
        let index = KnnIndex::new(set, Metric::L2).unwrap();
        let q = [1.0, 2.0, 0.5];
        let mut prev = Vec::new();
        for k in 1..=25 {
            let cur = index.query(&q, k).unwrap();
            prop_assert_eq!(&cur[..k - 1], &prev[..]);
            prev = cur;
        }
    }
}
