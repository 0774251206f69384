mod support;

use mari::numerics::linalg::singular_values;
use mari::numerics::stats::{argmin, auc};
use mari::numerics::{
    entropy, grad_check, median, pca_fit, project_split, quantile, reduced_qr, spectral_norm,
    Basis, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracles::{median_by_counting, pca_gap, qr_gap, quantile_by_counting, to_na};
use support::RandomGraph;

fn tensor(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..25 {
        let g = RandomGraph::new(seed);
        let err = grad_check(|t, p| g.build(t, p), &g.params, 1e-5).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn pca_matches_dense_eigendecomposition() {
    for seed in 0..5 {
        let rows = tensor(seed, &[40, 8]);
        assert!(pca_gap(&rows, 3) < 1e-8);
    }
}

#[test]
fn pca_reports_rank_deficiency() {
    let mut rows = tensor(1, &[10, 4]);
    for i in 0..10 {
        rows.row_mut(i)[3] = 0.0;
        rows.row_mut(i)[2] = 0.0;
    }
    assert!(pca_fit(&rows, 3).is_err());
    assert!(pca_fit(&rows, 2).is_ok());
}

#[test]
fn qr_projector_matches_pseudoinverse() {
    for seed in 0..10 {
        assert!(qr_gap(&tensor(seed, &[12, 3])) < 1e-8);
    }
}

#[test]
fn qr_rejects_dependent_columns() {
    let mut u = tensor(2, &[6, 2]);
    for i in 0..6 {
        let v = u.get(i, 0);
        u.set(i, 1, 2.0 * v);
    }
    assert!(reduced_qr(&u).is_err());
}

#[test]
fn spectral_norm_matches_svd() {
    for seed in 0..10 {
        let m = tensor(seed, &[7, 5]);
        let svd = to_na(&m).singular_values().max();
        assert!((spectral_norm(&m).unwrap() - svd).abs() < 1e-6 * svd.max(1.0));
        assert!((singular_values(&m).unwrap()[0] - svd).abs() < 1e-8);
    }
}

#[test]
fn quantile_convention_examples() {
    let v: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(quantile(&v, 0.9).unwrap(), 9.0);
    assert_eq!(quantile(&v, 0.91).unwrap(), 10.0);
    assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
    assert_eq!(quantile(&v, 1.0).unwrap(), 10.0);
    assert!(quantile(&[], 0.5).is_err());
    assert!(quantile(&v, 1.5).is_err());
}

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![(-50i32..50).prop_map(f64::from), -10.0..10.0f64],
        1..40,
    )
}

proptest! {
    #[test]
    fn quantile_matches_counting(v in sample(), q in 0.0..=1.0f64) {
        prop_assert_eq!(quantile(&v, q).unwrap(), quantile_by_counting(&v, q));
    }

    #[test]
    fn median_matches_counting(v in sample()) {
        prop_assert_eq!(median(&v).unwrap(), median_by_counting(&v));
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-30.0..30.0f64, 1..12)) {
        let p = mari::numerics::kernels::softmax_row(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let lp = mari::numerics::kernels::log_softmax_row(&z);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn entropy_within_bounds(z in prop::collection::vec(-10.0..10.0f64, 1..12)) {
        let p = mari::numerics::kernels::softmax_row(&z);
        let h = entropy(&p).unwrap();
        prop_assert!(h >= -1e-12 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn auc_is_antisymmetric(a in prop::collection::vec(-5i32..5, 1..20), b in prop::collection::vec(-5i32..5, 1..20)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        prop_assert!((auc(&a, &b).unwrap() + auc(&b, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmin_takes_lowest_index(v in prop::collection::vec(0i32..4, 1..10)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let i = argmin(&v);
        prop_assert!(v.iter().all(|&x| x >= v[i]));
        prop_assert!(v[..i].iter().all(|&x| x > v[i]));
    }

    #[test]
    fn project_split_is_orthogonal(seed in 0u64..1000, r in 1usize..6) {
        let b = Basis::new(reduced_qr(&tensor(seed, &[8, r])).unwrap()).unwrap();
        prop_assert!(b.orthonormality_error() < 1e-12);
        let v = tensor(seed + 1, &[8]).into_data();
        let (inside, off) = project_split(&b, &v).unwrap();
        let dot: f64 = inside.iter().zip(&off).map(|(a, c)| a * c).sum();
        prop_assert!(dot.abs() < 1e-10);
        for ((a, c), x) in inside.iter().zip(&off).zip(&v) {
            prop_assert!((a + c - x).abs() < 1e-12);
        }
    }

    #[test]
    fn qr_is_orthonormal(seed in 0u64..1000, r in 1usize..6) {
        let q = reduced_qr(&tensor(seed, &[10, r])).unwrap();
        let g = q.transpose().matmul(&q);
        prop_assert!(g.sub(&Tensor::identity(r)).max_abs() < 1e-12);
    }
}
