mod common;

use fancl::clustering::{cluster_purity, dbscan, pairwise_cosine_distance, DbscanConfig, DistanceMatrix, PseudoLabeling};
use fancl::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unit vectors scattered around a few random centres.
fn blobs(rng: &mut ChaCha8Rng, centres: usize, per: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    let cs: Vec<Vec<f64>> = (0..centres).map(|_| common::random_unit(rng, d)).collect();
    let mut out = Vec::new();
    for c in &cs {
        for _ in 0..per {
            let v: Vec<f64> = c.iter().map(|x| x + rng.random_range(-spread..spread)).collect();
            out.push(common::normalized(&v));
        }
    }
    out
}

fn library_labels(rows: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i32> {
    let dist = pairwise_cosine_distance(&Tensor::from_rows(rows).unwrap()).unwrap();
    dbscan(&dist, &DbscanConfig { eps, min_pts }).unwrap().to_i32()
}

#[test]
fn dbscan_matches_reference_on_random_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..60 {
        let (c, per, spread) = (rng.random_range(1..5), rng.random_range(2..10), rng.random_range(0.05..0.6));
        let rows = blobs(&mut rng, c, per, 6, spread);
        let eps = rng.random_range(0.02..0.6);
        let min_pts = rng.random_range(1..6);
        let want = common::naive_dbscan(&common::cosine_distance_matrix(&rows), eps, min_pts);
        assert_eq!(library_labels(&rows, eps, min_pts), want);
    }
}

#[test]
fn outliers_take_minus_one_and_ids_are_compact() {
    let rows = [vec![1.0, 0.0], vec![0.999, 0.0447], vec![0.0, 1.0]];
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| common::normalized(r)).collect();
    assert_eq!(library_labels(&rows, 0.01, 2), vec![0, 0, -1]);
}

#[test]
fn distance_matrix_rejects_asymmetry() {
    let d = vec![0.0, 0.5, 0.4, 0.0];
    assert!(DistanceMatrix::from_raw(2, d).is_err());
}

proptest! {
    #[test]
    fn partition_is_permutation_invariant(seed in any::<u64>(), eps in 0.05f64..0.5, min_pts in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = blobs(&mut rng, 3, 6, 5, 0.3);
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let base = library_labels(&rows, eps, min_pts);
        let shuffled = library_labels(&permuted, eps, min_pts);
        // Border points reachable from two clusters may legitimately switch;
        // compare only core-point structure via pairwise co-membership of cores.
        let dist = common::cosine_distance_matrix(&rows);
        let core: Vec<bool> = (0..rows.len())
            .map(|i| dist[i].iter().filter(|&&d| d <= eps).count() >= min_pts)
            .collect();
        for a in 0..rows.len() {
            for b in 0..rows.len() {
                let (pa, pb) = (perm.iter().position(|&p| p == a).unwrap(), perm.iter().position(|&p| p == b).unwrap());
                if core[a] && core[b] {
                    prop_assert_eq!(base[a] == base[b], shuffled[pa] == shuffled[pb]);
                }
                if !core[a] {
                    prop_assert_eq!(base[a] == -1, shuffled[pa] == -1);
                }
            }
        }
    }

    #[test]
    fn purity_matches_tally(labels in proptest::collection::vec(proptest::option::of(0usize..4), 1..30), seed in any::<u64>()) {
        let labeling = PseudoLabeling::new(common::canonical(&labels).iter().map(|&l| (l >= 0).then_some(l as usize)).collect()).unwrap();
        prop_assume!(labeling.num_clusters > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..labels.len()).map(|_| rng.random_range(0..3)).collect();
        let got = cluster_purity(&labeling, &truth).unwrap();
        let want = common::purity(&labeling.labels, &truth);
        prop_assert!((got - want).abs() < 1e-12);
    }
}
