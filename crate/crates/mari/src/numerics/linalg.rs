use serde::{Deserialize, Serialize};

use super::tensor::{dot, norm, Tensor};
use crate::error::{ensure_dim, MariError, Result};

pub const EIGEN_TOL: f64 = 1e-10;
pub const EIGEN_MAX_SWEEPS: usize = 10_000;
pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 10_000;
pub const QR_RANK_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm falls below
/// `EIGEN_TOL · max(1, ‖A‖_F)`. Eigenvalues come back in descending order with
/// eigenvectors as the matching columns, each signed so its largest-magnitude
/// entry is positive.
pub fn sym_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    ensure_dim(n, a.cols())?;
    let mut m = a.as_matrix();
    let mut v = Tensor::identity(n);
    let scale = a.frobenius().max(1.0);
    let mut converged = n < 2;
    for _ in 0..EIGEN_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= EIGEN_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(MariError::NoConvergence {
            what: "jacobi eigensolver",
            iterations: EIGEN_MAX_SWEEPS,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vecs = Tensor::zeros(&[n, n]);
    for (c, &i) in order.iter().enumerate() {
        let col = v.column(i);
        let big = col
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for (r, x) in col.iter().enumerate() {
            vecs.set(r, c, sign * x);
        }
    }
    Ok((vals, vecs))
}

/// Matrix with orthonormal columns spanning a retained subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    matrix: Tensor,
}

impl Basis {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let b = Basis {
            matrix: matrix.as_matrix(),
        };
        let err = b.orthonormality_error();
        if err >= 1e-8 {
            return Err(MariError::Contract(format!(
                "basis columns not orthonormal (‖BᵀB−I‖={err:e})"
            )));
        }
        Ok(b)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn rank(&self) -> usize {
        self.matrix.cols()
    }

    pub fn orthonormality_error(&self) -> f64 {
        let g = self.matrix.matmul_tn(&self.matrix);
        g.sub(&Tensor::identity(self.rank())).frobenius()
    }

    /// `B Bᵀ`.
    pub fn projector(&self) -> Tensor {
        self.matrix.matmul_nt(&self.matrix)
    }

    /// `I − B Bᵀ`.
    pub fn complement_projector(&self) -> Tensor {
        Tensor::identity(self.dim()).sub(&self.projector())
    }

    /// Orthonormal basis of the orthogonal complement, via the eigenvectors of
    /// `I − B Bᵀ` with unit eigenvalue.
    pub fn complement(&self) -> Result<Basis> {
        let (vals, vecs) = sym_eigen(&self.complement_projector())?;
        let k = vals.iter().filter(|&&v| v > 0.5).count();
        let mut m = Tensor::zeros(&[self.dim(), k]);
        for c in 0..k {
            for r in 0..self.dim() {
                m.set(r, c, vecs.get(r, c));
            }
        }
        Basis::new(m)
    }
}

/// Principal subspace of a row sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaFit {
    pub basis: Basis,
    pub mean: Vec<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaFit {
    pub fn explained_variance(&self) -> f64 {
        self.eigenvalues[..self.basis.rank()].iter().sum()
    }

    /// Coordinates of `x − mean` along the basis columns.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.basis.matrix.matvec_t(&c)
    }
}

/// Rank-`k` PCA of mean-centred rows (covariance divisor `n − 1`).
pub fn pca_fit(rows: &Tensor, k: usize) -> Result<PcaFit> {
    let (n, d) = (rows.rows(), rows.cols());
    if k == 0 || k > d || n < k {
        return Err(MariError::Contract(format!(
            "pca_fit needs n ≥ k ≥ 1 and k ≤ d (n={n}, k={k}, d={d})"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(rows.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centred = rows.as_matrix();
    for i in 0..n {
        for (x, m) in centred.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centred.matmul_tn(&centred).scale(1.0 / denom);
    let (vals, vecs) = sym_eigen(&cov)?;
    let top = vals[0].max(0.0);
    let effective_rank = vals
        .iter()
        .filter(|&&v| v > EIGEN_TOL * top.max(f64::MIN_POSITIVE) && v > 0.0)
        .count();
    if effective_rank < k {
        return Err(MariError::Degenerate {
            effective_rank,
            requested: k,
        });
    }
    let mut m = Tensor::zeros(&[d, k]);
    for c in 0..k {
        for r in 0..d {
            m.set(r, c, vecs.get(r, c));
        }
    }
    Ok(PcaFit {
        basis: Basis::new(m)?,
        mean,
        eigenvalues: vals,
    })
}

/// `(B Bᵀ v, v − B Bᵀ v)`.
pub fn project_split(b: &Basis, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_dim(b.dim(), v.len())?;
    let coords = b.matrix.matvec_t(v);
    let inside = b.matrix.matvec(&coords);
    let off = v.iter().zip(&inside).map(|(a, c)| a - c).collect();
    Ok((inside, off))
}

/// Singular values of a `d × r` matrix, descending, from the eigenvalues of `AᵀA`.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let g = a.matmul_tn(a);
    let (vals, _) = sym_eigen(&g)?;
    Ok(vals.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// Reduced QR by twice-iterated classical Gram-Schmidt.
///
/// Rank deficiency (minimum singular value at or below `1e−10`) is an error.
pub fn reduced_qr(u: &Tensor) -> Result<Tensor> {
    let (d, r) = (u.rows(), u.cols());
    if r > d {
        return Err(MariError::RankDeficient {
            min_singular_value: 0.0,
        });
    }
    let smin = *singular_values(u)?.last().unwrap_or(&0.0);
    if smin <= QR_RANK_TOL {
        return Err(MariError::RankDeficient {
            min_singular_value: smin,
        });
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(r);
    for j in 0..r {
        let mut col = u.column(j);
        for _ in 0..2 {
            for prev in &q {
                let c = dot(prev, &col);
                for (x, p) in col.iter_mut().zip(prev) {
                    *x -= c * p;
                }
            }
        }
        let nrm = norm(&col);
        if nrm <= QR_RANK_TOL {
            return Err(MariError::RankDeficient {
                min_singular_value: nrm,
            });
        }
        col.iter_mut().for_each(|x| *x /= nrm);
        q.push(col);
    }
    let mut out = Tensor::zeros(&[d, r]);
    for (c, col) in q.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            out.set(i, c, *x);
        }
    }
    Ok(out)
}

/// Largest singular value of `m` by power iteration on `mᵀm`.
///
/// Stops when successive estimates agree to `POWER_TOL · max(1, σ)`.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    let n = m.cols();
    if n == 0 || m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.01 * (i as f64 + 1.0).sqrt())
        .collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mv = m.matvec(&v);
        let mut w = m.matvec_t(&mv);
        let nw = norm(&w);
        let next = norm(&mv);
        if nw == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        if (next - sigma).abs() <= POWER_TOL * next.max(1.0) {
            return Ok(norm(&m.matvec(&v)).max(next));
        }
        sigma = next;
    }
    Err(MariError::NoConvergence {
        what: "power iteration",
        iterations: POWER_MAX_ITERS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal_is_sorted() {
        let a = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 3., 0., 0., 0., 2.]).unwrap();
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        assert_eq!(vecs.column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn pca_of_a_line() {
        let pts: Vec<Vec<f64>> = (-3..=3)
            .map(|t| vec![t as f64 * 0.6, t as f64 * 0.8])
            .collect();
        let fit = pca_fit(&Tensor::from_rows(&pts).unwrap(), 1).unwrap();
        let col = fit.basis.matrix().column(0);
        assert!((col[0].abs() - 0.6).abs() < 1e-12 && (col[1].abs() - 0.8).abs() < 1e-12);
        let err = pca_fit(&Tensor::from_rows(&pts).unwrap(), 2).unwrap_err();
        assert!(matches!(
            err,
            MariError::Degenerate {
                effective_rank: 1,
                requested: 2
            }
        ));
    }

    #[test]
    fn qr_of_duplicate_columns_fails() {
        let u = Tensor::matrix(3, 2, vec![1., 1., 2., 2., 3., 3.]).unwrap();
        assert!(matches!(
            reduced_qr(&u),
            Err(MariError::RankDeficient { .. })
        ));
    }

    #[test]
    fn qr_of_orthonormal_is_identity_up_to_sign() {
        let u = Tensor::matrix(3, 2, vec![0., 1., 1., 0., 0., 0.]).unwrap();
        assert_eq!(reduced_qr(&u).unwrap(), u);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = Tensor::matrix(2, 2, vec![3., 0., 0., -4.]).unwrap();
        assert!((spectral_norm(&m).unwrap() - 4.0).abs() < 1e-7);
        assert_eq!(spectral_norm(&Tensor::zeros(&[2, 2])).unwrap(), 0.0);
    }

    #[test]
    fn complement_has_the_rest() {
        let b = Basis::new(Tensor::matrix(3, 1, vec![1., 0., 0.]).unwrap()).unwrap();
        let c = b.complement().unwrap();
        assert_eq!(c.rank(), 2);
        assert!(b.matrix().matmul_tn(c.matrix()).max_abs() < 1e-12);
    }
}
