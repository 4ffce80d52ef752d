mod common;

use fancl::memory::{MemoryBank, Space};
use fancl::tensorcore::{adam_step, AdamConfig, AdamState};
use fancl::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bank(rng: &mut ChaCha8Rng, m: usize, d: usize) -> MemoryBank {
    let rows: Vec<Vec<f64>> = (0..m).map(|_| common::random_unit(rng, d)).collect();
    MemoryBank::new(Space::Noised, Tensor::from_rows(&rows).unwrap()).unwrap()
}

fn max_norm_error(bank: &MemoryBank) -> f64 {
    (0..bank.len())
        .map(|i| (common::dot(bank.entries().row(i), bank.entries().row(i)).sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn long_update_sequences_stay_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut bank = random_bank(&mut rng, 7, 16);
    for _ in 0..10_000 {
        let label = rng.random_range(0..7);
        let f = common::random_unit(&mut rng, 16);
        bank.momentum_update(Some(label), &f, rng.random_range(0.0..=1.0)).unwrap();
    }
    assert!(max_norm_error(&bank) < 1e-6);
}

#[test]
fn update_matches_reference_and_touches_one_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut bank = random_bank(&mut rng, 4, 5);
    let before = bank.clone();
    let f = common::random_unit(&mut rng, 5);
    bank.momentum_update(Some(2), &f, 0.3).unwrap();
    let m = before.entries().row(2);
    let want = common::normalized(&m.iter().zip(&f).map(|(a, b)| 0.3 * a + 0.7 * b).collect::<Vec<_>>());
    for (a, b) in bank.entries().row(2).iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    for i in [0, 1, 3] {
        assert_eq!(bank.entries().row(i), before.entries().row(i));
    }
}

#[test]
fn alpha_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mut bank = random_bank(&mut rng, 3, 6);
    let before = bank.clone();
    let f = common::random_unit(&mut rng, 6);
    bank.momentum_update(Some(1), &f, 1.0).unwrap();
    assert_eq!(bank, before);
    bank.momentum_update(Some(1), &f, 0.0).unwrap();
    assert_eq!(bank.entries().row(1), &f[..]);
}

#[test]
fn outliers_and_bad_labels_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut bank = random_bank(&mut rng, 3, 4);
    let f = common::random_unit(&mut rng, 4);
    assert!(bank.momentum_update(None, &f, 0.1).is_err());
    assert!(bank.momentum_update(Some(3), &f, 0.1).is_err());
    assert!(MemoryBank::new(Space::Original, Tensor::ones(&[2, 3])).is_err());
}

#[test]
fn adam_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let n = 6;
    let mut p = Tensor::new(vec![n], common::random_vec(&mut rng, n, 2.0)).unwrap();
    let mut refp = p.data().to_vec();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let cfg = AdamConfig { weight_decay: 5e-4, ..AdamConfig::default() };
    let mut state = AdamState::new(cfg, [p.dims()]);
    for t in 1..=50u64 {
        let g = Tensor::new(vec![n], common::random_vec(&mut rng, n, 1.0)).unwrap();
        adam_step(&mut [("p", &mut p)], &[&g], &mut state, 1e-2).unwrap();
        for j in 0..n {
            (refp[j], m[j], v[j]) = common::adam_scalar(refp[j], g.data()[j], m[j], v[j], t, 1e-2, 5e-4);
        }
        for (a, b) in p.data().iter().zip(&refp) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_two_steps_on_quadratic() {
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut x = Tensor::from_vec(vec![3.0]).unwrap();
    let mut state = AdamState::new(cfg, [x.dims()]);
    let (mut rx, mut m, mut v) = (3.0, 0.0, 0.0);
    for t in 1..=2 {
        let g = Tensor::from_vec(vec![2.0 * x.data()[0]]).unwrap();
        adam_step(&mut [("x", &mut x)], &[&g], &mut state, 0.1).unwrap();
        (rx, m, v) = common::adam_scalar(rx, 2.0 * rx, m, v, t, 0.1, 0.0);
        assert!((x.data()[0] - rx).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn random_update_sequences_keep_unit_rows(seed in any::<u64>(), steps in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = random_bank(&mut rng, 5, 8);
        for _ in 0..steps {
            let f = common::random_unit(&mut rng, 8);
            bank.momentum_update(Some(rng.random_range(0..5)), &f, rng.random_range(0.0..=1.0)).unwrap();
        }
        prop_assert!(max_norm_error(&bank) < 1e-6);
    }
}
