//! Independent reference implementations.

use mari::diagnostics::{CostInputs, CostReport};
use mari::numerics::{pca_fit, reduced_qr, Tensor};
use nalgebra::DMatrix;
use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive};

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn max_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Largest gap between our PCA and a dense eigendecomposition: eigenvalues
/// and the rank-`k` projector (sign-free).
pub fn pca_gap(rows: &Tensor, k: usize) -> f64 {
    let fit = pca_fit(rows, k).expect("pca");
    let x = to_na(rows);
    let n = x.nrows();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut gap = 0.0f64;
    for (i, &j) in order.iter().enumerate() {
        gap = gap.max((fit.eigenvalues[i] - eig.eigenvalues[j]).abs());
    }
    let top = DMatrix::from_fn(x.ncols(), k, |r, c| eig.eigenvectors[(r, order[c])]);
    let ours = to_na(fit.basis.matrix());
    gap.max(max_gap(
        &(&top * top.transpose()),
        &(&ours * ours.transpose()),
    ))
}

/// Gap between `Q Qᵀ` from our QR and `U U⁺` from a pseudoinverse.
pub fn qr_gap(u: &Tensor) -> f64 {
    let q = to_na(&reduced_qr(u).expect("qr"));
    let un = to_na(u);
    let pinv = un.clone().pseudo_inverse(1e-12).expect("pseudoinverse");
    max_gap(&(&q * q.transpose()), &(&un * pinv))
}

/// Smallest sample value whose count of values at or below reaches `⌈q·n⌉`.
pub fn quantile_by_counting(values: &[f64], q: f64) -> f64 {
    let n = values.len();
    let need = (((q * n as f64) - 1e-9).ceil() as usize).clamp(1, n);
    values
        .iter()
        .copied()
        .filter(|&v| values.iter().filter(|&&w| w <= v).count() >= need)
        .fold(f64::INFINITY, f64::min)
}

pub fn median_by_counting(values: &[f64]) -> f64 {
    let n = values.len();
    let kth = |k: usize| {
        values
            .iter()
            .copied()
            .filter(|&v| values.iter().filter(|&&w| w <= v).count() > k)
            .fold(f64::INFINITY, f64::min)
    };
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        (kth(n / 2 - 1) + kth(n / 2)) / 2.0
    }
}

/// Ten tuples of dyadic inputs, so that every intermediate sum and product is exact.
pub fn cost_tuples() -> Vec<CostInputs> {
    let base = CostInputs {
        p: 32.0,
        c: 4.0,
        l_opt: 1.0,
        k: 2.0,
        t_route: 4.0,
        m: 1.0,
        q: 0.5,
        s_i: 1.0,
        l_i: 1.0,
        s_r: 5.0,
        l_r: 4.0,
        f: 1.0,
        a: 0.0,
    };
    vec![
        base,
        CostInputs { k: 3.0, ..base },
        CostInputs {
            q: 0.25,
            k: 4.0,
            ..base
        },
        CostInputs {
            q: 0.0,
            m: 0.0,
            k: 1.0,
            ..base
        },
        CostInputs { a: 0.125, ..base },
        CostInputs {
            p: 7.0,
            c: 3.0,
            l_opt: 5.0,
            t_route: 15.0,
            ..base
        },
        CostInputs {
            f: 2.5,
            a: 0.75,
            s_i: 2.0,
            l_i: 3.0,
            ..base
        },
        CostInputs {
            q: 1.0,
            k: 8.0,
            m: 2.0,
            ..base
        },
        CostInputs {
            p: 100.0,
            c: 2.0,
            l_opt: 12.0,
            t_route: 24.0,
            q: 0.375,
            ..base
        },
        CostInputs {
            a: 1.5,
            s_r: 64.0,
            l_r: 32.0,
            q: 0.625,
            k: 5.0,
            ..base
        },
    ]
}

fn r(x: f64) -> BigRational {
    BigRational::from_f64(x).expect("finite")
}

fn f(x: BigRational) -> f64 {
    x.to_f64().expect("representable")
}

/// The cost decomposition in exact rational arithmetic, rounded once at the end.
pub fn cost_by_hand(x: &CostInputs) -> CostReport {
    let (p, c, l, k, t, m, q) = (
        r(x.p),
        r(x.c),
        r(x.l_opt),
        r(x.k),
        r(x.t_route),
        r(x.m),
        r(x.q),
    );
    let (si, li, sr, lr, ff, a) = (r(x.s_i), r(x.l_i), r(x.s_r), r(x.l_r), r(x.f), r(x.a));
    let one = r(1.0);
    let tokens = &p + &c * &l;
    let route = (&k - &one) * (&p + &t);
    let single = &ff * &tokens + &a * &si * &li;
    let ours = &ff * &tokens + &m * &ff * &p + &q * &ff * &route + &q * &a * &si * &li;
    let reft = &ff * &tokens + &a * &sr * &lr;
    let ratio = &one + &m * &p / &tokens + &q * &route / &tokens;
    CostReport {
        cost_single: f(single.clone()),
        cost_route: f(&ff * &route),
        cost_ours: f(ours.clone()),
        cost_reft: f(reft.clone()),
        ratio_single: f(ratio.clone()),
        ratio_reft: f(ratio),
        exact_ratio_single: f(&ours / &single),
        exact_ratio_reft: f(&ours / &reft),
    }
}
