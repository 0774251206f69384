mod support;

use mari::backbone::{Backbone, BackboneConfig, InjectionSite};
use mari::diagnostics::{
    cost_model, energy_bound, restricted_jacobians, risk_from_table, BackboneSite, CostInputs,
    LinearToy, SiteMap,
};
use mari::numerics::{reduced_qr, Basis, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracles::{cost_by_hand, cost_tuples, to_na};

fn table() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..5, 1usize..30).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(prop::collection::vec(0.0..=1.0f64, k), n),
            prop::collection::vec(0..k, n),
        )
    })
}

proptest! {
    #[test]
    fn risk_bound_holds_for_any_table((losses, routed) in table()) {
        let r = risk_from_table(&losses, &routed, 1.0).unwrap();
        prop_assert!(r.bound_holds);
        prop_assert!(r.improvement_implication_holds);
        prop_assert!(r.r_min <= r.r_ent + 1e-12);
        prop_assert!(r.r_min <= r.r_single + 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.eta));
        prop_assert!(r.r_ent <= r.r_min + r.eta + 1e-12);
    }

    #[test]
    fn zero_one_tables_are_exact(
        (bits, routed) in (1usize..4, 1usize..25).prop_flat_map(|(k, n)| (
            prop::collection::vec(prop::collection::vec(any::<bool>(), k), n),
            prop::collection::vec(0..k, n),
        ))
    ) {
        let losses: Vec<Vec<f64>> =
            bits.iter().map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
        let r = risk_from_table(&losses, &routed, 1.0).unwrap();
        let n = losses.len() as f64;
        let miss = losses
            .iter()
            .zip(&routed)
            .filter(|(row, &k)| row[k] == 1.0 && row.contains(&0.0))
            .count();
        prop_assert_eq!(r.eta, miss as f64 / n);
    }
}

#[test]
fn risk_rejects_bad_tables() {
    assert!(risk_from_table(&[], &[], 1.0).is_err());
    assert!(risk_from_table(&[vec![0.5, 2.0]], &[0], 1.0).is_err());
    assert!(risk_from_table(&[vec![0.5]], &[1], 1.0).is_err());
    assert!(risk_from_table(&[vec![0.5], vec![0.5, 0.1]], &[0, 0], 1.0).is_err());
}

fn toy(seed: u64, d: usize, layers: usize) -> LinearToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LinearToy {
        weights: (0..layers)
            .map(|_| Tensor::randn(&[d, d], 0.6, &mut rng))
            .collect(),
        h: Tensor::randn(&[d], 1.0, &mut rng).into_data(),
    }
}

fn basis(seed: u64, d: usize, r: usize) -> Basis {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Basis::new(reduced_qr(&Tensor::randn(&[d, r], 1.0, &mut rng)).unwrap()).unwrap()
}

#[test]
fn linear_toy_constants_match_svd() {
    for seed in 0..5 {
        let t = toy(seed, 6, 3);
        let b = basis(seed + 100, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = Tensor::randn(&[6], 1.0, &mut rng).into_data();
        let rep = energy_bound(&t, &delta, &b, &[0.5, 1.0, 4.0]).unwrap();
        assert!(rep.all_hold());
        assert!(rep.slope_gap < 1e-6);
        let q = to_na(b.matrix());
        let qc = to_na(b.complement().unwrap().matrix());
        for m in 0..=3 {
            let p = to_na(&t.product(m));
            let kappa = (&p * &q).singular_values().max();
            let gamma = (&p * &qc).singular_values().max();
            assert!((rep.kappa_layers[m] - kappa).abs() < 1e-6 * kappa.max(1.0));
            assert!((rep.gamma_layers[m] - gamma).abs() < 1e-6 * gamma.max(1.0));
            let exact = (&p * nalgebra::DVector::from_vec(delta.clone())).norm();
            assert!((rep.responses[1][m] - exact).abs() < 1e-9 * exact.max(1.0));
        }
    }
}

#[test]
fn backbone_jacobians_agree_with_one_sided_differences() {
    let mut m = Backbone::init(BackboneConfig {
        seed: 3,
        ..BackboneConfig::default()
    })
    .unwrap();
    m.freeze();
    let site = InjectionSite::last_token(2);
    let map = BackboneSite::new(&m, &[40, 17, 50, 51, 16], &site).unwrap();
    let q = basis(9, m.d_model(), 3);
    let jac = restricted_jacobians(&map, q.matrix()).unwrap();
    assert_eq!(jac.len(), m.config.n_layers - site.layer + 1);
    assert!(jac[0].sub(q.matrix()).max_abs() < 1e-6);

    let h = map.site_state();
    let t = 1e-7;
    let mut probes = vec![h.clone()];
    for j in 0..3 {
        probes.push(
            h.iter()
                .zip(q.matrix().column(j))
                .map(|(a, b)| a + t * b)
                .collect(),
        );
    }
    let out = map.propagate(&probes).unwrap();
    for (layer, jm) in jac.iter().enumerate() {
        for j in 0..3 {
            for i in 0..m.d_model() {
                let fd = (out[j + 1][layer][i] - out[0][layer][i]) / t;
                assert!(
                    (fd - jm.get(i, j)).abs() < 1e-4 * (1.0 + fd.abs()),
                    "layer {layer}"
                );
            }
        }
    }
}

#[test]
fn cost_model_matches_exact_arithmetic() {
    for x in cost_tuples() {
        assert_eq!(cost_model(&x).unwrap(), cost_by_hand(&x));
    }
}

#[test]
fn cost_model_rejects_bad_inputs() {
    let x = cost_tuples()[0];
    for bad in [
        CostInputs { f: 0.0, ..x },
        CostInputs { k: 0.5, ..x },
        CostInputs { q: -1.0, ..x },
        CostInputs {
            p: 0.0,
            c: 0.0,
            ..x
        },
        CostInputs { a: f64::NAN, ..x },
    ] {
        assert!(cost_model(&bad).is_err(), "{bad:?}");
    }
}
