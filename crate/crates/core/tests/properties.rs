mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use spectralgp::bounds::{frobenius_distance, spectral_distance};
use spectralgp::harness::split;
use spectralgp::kernel::{gram, se_kernel, HyperParams};
use spectralgp::numerics::{sym_eigen, CholeskyFactor, SymMatrix};
use spectralgp::ssgp::{averaged_gram, clustered_gram};

/// Dominant |eigenvalue| by power iteration on A², which is immune to a
/// ±λ tie.
fn power_norm(a: &DMatrix<f64>) -> f64 {
    let a2 = a * a;
    let n = a.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    let mut est = 0.0;
    for _ in 0..20_000 {
        let w = &a2 * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm / v.norm();
        v = w / norm;
        if (next - est).abs() <= 1e-15 * next {
            est = next;
            break;
        }
        est = next;
    }
    est.sqrt()
}

fn sym_strategy(max_n: usize) -> impl Strategy<Value = SymMatrix> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(-3.0..3.0f64, n * n).prop_map(move |v| {
            let m = DMatrix::from_vec(n, n, v);
            SymMatrix::from_matrix((&m + m.transpose()) * 0.5).unwrap()
        })
    })
}

fn points(max_n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-2.0..2.0f64, n * d).prop_map(move |v| DMatrix::from_vec(n, d, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_norm_matches_power_iteration(a in sym_strategy(8)) {
        let eig = sym_eigen(&a).unwrap();
        let direct = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert_eq!(eig.spectral_norm(), direct);
        let power = power_norm(a.as_matrix());
        prop_assert!((power - direct).abs() <= 1e-6 * direct.max(1e-12), "{} vs {}", power, direct);
    }

    #[test]
    fn eigen_reconstructs(a in sym_strategy(8)) {
        let eig = sym_eigen(&a).unwrap();
        prop_assert!((eig.reconstruct() - a.as_matrix()).amax() < 1e-10);
        prop_assert!(eig.eigenvalues.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn kernel_bounded_and_symmetric(x in prop::collection::vec(-3.0..3.0f64, 3),
                                    y in prop::collection::vec(-3.0..3.0f64, 3),
                                    t in prop::collection::vec(0.2..3.0f64, 3)) {
        let hp = HyperParams::new(&t, 0.1).unwrap();
        let k = se_kernel(&x, &y, &hp).unwrap();
        prop_assert!((0.0..=1.0).contains(&k));
        prop_assert_eq!(k, se_kernel(&y, &x, &hp).unwrap());
        prop_assert_eq!(se_kernel(&x, &x, &hp).unwrap(), 1.0);
    }

    #[test]
    fn gram_with_noise_is_factorizable(x in points(20, 2), noise in 0.05..2.0f64) {
        let hp = HyperParams::isotropic(2, 1.0, noise).unwrap();
        let k = gram(&x, &hp).unwrap();
        let chol = CholeskyFactor::new(&k.add_diagonal(hp.noise_var())).unwrap();
        prop_assert!(chol.log_det().is_finite());
    }

    #[test]
    fn spectral_never_exceeds_frobenius(x in points(15, 2), p in 1usize..40, seed in 0u64..1000) {
        let hp = HyperParams::isotropic(2, 0.8, 0.3).unwrap();
        let k = gram(&x, &hp).unwrap();
        let a = averaged_gram(&x, &hp, p, seed).unwrap();
        prop_assert!(spectral_distance(&k, &a.matrix).unwrap() <= frobenius_distance(&k, &a.matrix).unwrap() + 1e-12);
        // unit diagonal: cos(0) = 1
        for i in 0..x.nrows() {
            prop_assert!((a.matrix.get(i, i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn clustered_gram_zero_off_cluster(x in points(15, 2), seed in 0u64..1000, k in 1usize..4) {
        let hp = HyperParams::isotropic(2, 1.0, 0.3).unwrap();
        let labels: Vec<usize> = (0..x.nrows()).map(|i| i % k).collect();
        let g = clustered_gram(&x, &labels, &hp, 8, seed).unwrap();
        for i in 0..x.nrows() {
            for j in 0..x.nrows() {
                if labels[i] != labels[j] {
                    prop_assert_eq!(g.matrix.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn split_partitions(n in 2usize..300, frac in 0.05..0.95f64, seed in 0u64..10_000) {
        let (train, test) = split(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, frac, seed).unwrap(), (train, test));
    }
}
