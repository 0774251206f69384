//! Forward kernels shared by the plain evaluator and the tape.

use super::tensor::{dot, Tensor};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `out[i][j] = a[i][j] + b[j]`.
pub fn add_row(a: &Tensor, b: &Tensor) -> Tensor {
    let c = a.cols();
    assert_eq!(c, b.len(), "add_row width");
    let mut out = a.clone();
    for i in 0..a.rows() {
        for (o, bj) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o += bj;
        }
    }
    out
}

pub struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, LayerNormCache) {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(g.len(), d, "layer_norm gain width");
    assert_eq!(b.len(), d, "layer_norm bias width");
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g.data()[j] + b.data()[j];
        }
    }
    (
        Tensor::raw(vec![n, d], y),
        LayerNormCache {
            xhat: Tensor::raw(vec![n, d], xhat),
            rstd,
        },
    )
}

/// Row segments of a packed batch: sequence `s` occupies rows
/// `starts[s]..starts[s] + lens[s]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub lens: Vec<usize>,
}

impl Segments {
    pub fn uniform(count: usize, len: usize) -> Self {
        Segments {
            lens: vec![len; count],
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn starts(&self) -> Vec<usize> {
        let mut s = 0;
        self.lens
            .iter()
            .map(|&l| {
                let out = s;
                s += l;
                out
            })
            .collect()
    }

    /// Row index of the final element of every segment.
    pub fn lasts(&self) -> Vec<usize> {
        let mut s = 0;
        self.lens
            .iter()
            .map(|&l| {
                s += l;
                s - 1
            })
            .collect()
    }

    /// Position of every packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }
}

/// Causal multi-head attention over packed `[q | k | v]` rows.
///
/// Returns the concatenated head outputs and the attention probabilities,
/// stored per segment as `heads × len × len` blocks.
pub fn attention(qkv: &Tensor, segs: &Segments, heads: usize) -> (Tensor, Vec<f64>) {
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    assert_eq!(qkv.cols(), 3 * d, "attention expects [q|k|v] rows");
    assert_eq!(segs.total(), n, "segments do not cover the batch");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(segs.lens.iter().map(|l| heads * l * l).sum());
    let mut scores = Vec::new();
    for (start, &len) in segs.starts().into_iter().zip(&segs.lens) {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let qi = &qkv.row(start + i)[off..off + dh];
                scores.clear();
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &qkv.row(start + j)[d + off..d + off + dh];
                    let s = dot(qi, kj) * scale;
                    mx = mx.max(s);
                    scores.push(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let o = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                for j in 0..len {
                    let p = if j <= i { scores[j] / z } else { 0.0 };
                    probs.push(p);
                    if p != 0.0 {
                        let vj = &qkv.row(start + j)[2 * d + off..2 * d + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
    }
    (Tensor::raw(vec![n, d], out), probs)
}

pub fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        out.extend(log_softmax_row(x.row(i)));
    }
    Tensor::raw(vec![x.rows(), x.cols()], out)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        out.extend(softmax_row(x.row(i)));
    }
    Tensor::raw(vec![x.rows(), x.cols()], out)
}

/// `out[i][m] = x[i][cols[i][m]]`; every row must pick the same count.
pub fn gather_cols(x: &Tensor, cols: &[Vec<usize>]) -> Tensor {
    assert_eq!(x.rows(), cols.len(), "gather_cols row count");
    let m = cols.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(cols.len() * m);
    for (i, c) in cols.iter().enumerate() {
        assert_eq!(c.len(), m, "gather_cols ragged selection");
        let row = x.row(i);
        out.extend(c.iter().map(|&j| row[j]));
    }
    Tensor::raw(vec![cols.len(), m], out)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "inverse of non-square matrix");
    let mut m = a.as_matrix();
    let mut inv = Tensor::identity(n);
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m.get(x, col).abs().total_cmp(&m.get(y, col).abs()))?;
        let pv = m.get(piv, col);
        if pv.abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let (a1, a2) = (m.get(col, j), m.get(piv, j));
                m.set(col, j, a2);
                m.set(piv, j, a1);
                let (b1, b2) = (inv.get(col, j), inv.get(piv, j));
                inv.set(col, j, b2);
                inv.set(piv, j, b1);
            }
        }
        for j in 0..n {
            m.set(col, j, m.get(col, j) / pv);
            inv.set(col, j, inv.get(col, j) / pv);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m.get(r, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m.set(r, j, m.get(r, j) - f * m.get(col, j));
                inv.set(r, j, inv.get(r, j) - f * inv.get(col, j));
            }
        }
    }
    inv.all_finite().then_some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_first_row_copies_value() {
        let qkv = Tensor::matrix(1, 6, vec![0.3, -0.2, 1.0, 2.0, 5.0, -7.0]).unwrap();
        let (out, probs) = attention(&qkv, &Segments::uniform(1, 1), 1);
        assert_eq!(out.data(), &[5.0, -7.0]);
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn inverse_recovers_identity() {
        let a = Tensor::matrix(3, 3, vec![2., 1., 0., 1., 3., 1., 0., 1., 4.]).unwrap();
        let inv = inverse(&a).unwrap();
        let id = a.matmul(&inv);
        assert!(id.sub(&Tensor::identity(3)).max_abs() < 1e-14);
        assert!(inverse(&Tensor::zeros(&[2, 2])).is_none());
    }

    #[test]
    fn segments_bookkeeping() {
        let s = Segments { lens: vec![2, 3] };
        assert_eq!(s.starts(), vec![0, 2]);
        assert_eq!(s.lasts(), vec![1, 4]);
        assert_eq!(s.positions(), vec![0, 1, 0, 1, 2]);
    }
}
