use std::collections::HashMap;

use super::kernels::{self, LayerNormCache, Segments};
use super::tensor::Tensor;
use crate::error::{MariError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        cache: LayerNormCache,
    },
    Attention {
        qkv: Var,
        segs: Segments,
        heads: usize,
        probs: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    GatherCols(Var, Vec<Vec<usize>>),
    LogSoftmax(Var),
    Softmax(Var),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    Transpose(Var),
    Inverse(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Sqrt(..) => "sqrt",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Embed { .. } => "embed",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::Transpose(..) => "transpose",
            Op::Inverse(..) => "inverse",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode computation record.
///
/// Nodes are appended in evaluation order, which is a topological order by
/// construction. Only leaves created with [`Tape::param`] are trainable;
/// [`Tape::constant`] leaves and [`Tape::detach`] outputs never carry
/// gradient, and nodes whose inputs are all gradient-free are skipped during
/// the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Grads {
    map: HashMap<Var, Tensor>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `a`, cut from the gradient graph.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = kernels::add_row(self.value(a), self.value(b));
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    /// Multiplies row `i` of `a` by `c[i]` (`c` has one entry per row).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(av.rows(), cv.len(), "mul_col row count");
        let mut out = av.as_matrix();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        self.push(out, Op::MulCol(a, c), &[a, c])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (v, cache) = kernels::layer_norm(self.value(x), self.value(g), self.value(b));
        self.push(v, Op::LayerNorm { x, g, b, cache }, &[x, g, b])
    }

    pub fn attention(&mut self, qkv: Var, segs: &Segments, heads: usize) -> Var {
        let (v, probs) = kernels::attention(self.value(qkv), segs, heads);
        self.push(
            v,
            Op::Attention {
                qkv,
                segs: segs.clone(),
                heads,
                probs,
            },
            &[qkv],
        )
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table).gather_rows(ids);
        self.push(
            v,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).gather_rows(idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Var {
        let mut v = self.value(base).as_matrix();
        let s = self.value(src);
        assert_eq!(s.rows(), idx.len(), "scatter_rows count");
        assert_eq!(s.cols(), v.cols(), "scatter_rows width");
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(s.row(k));
        }
        self.push(
            v,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            &[base, src],
        )
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[Vec<usize>]) -> Var {
        let v = kernels::gather_cols(self.value(a), cols);
        self.push(v, Op::GatherCols(a, cols.to_vec()), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = kernels::log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = kernels::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let v = Tensor::raw(vec![av.rows(), 1], data);
        self.push(v, Op::SumCols(a), &[a])
    }

    /// Column means as a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; c];
        for i in 0..n {
            for (d, x) in data.iter_mut().zip(av.row(i)) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= n as f64;
        }
        let v = Tensor::raw(vec![1, c], data);
        self.push(v, Op::MeanRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let v = kernels::inverse(self.value(a))
            .ok_or_else(|| MariError::Contract("inverse of a singular matrix".into()))?;
        Ok(self.push(v, Op::Inverse(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), n, "concat_cols row count");
                data.extend_from_slice(pv.row(i));
            }
        }
        let v = Tensor::raw(vec![n, total], data);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("reshape size");
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse sweep from a scalar `loss`.
///
/// Returns a gradient for every trainable leaf (zeros where the loss does not
/// depend on it). Frozen leaves never appear in the result.
pub fn backward(tape: &Tape, loss: Var) -> Result<Grads> {
    let lv = tape.value(loss);
    if !lv.is_scalar() {
        return Err(MariError::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            lv.shape()
        )));
    }
    for (i, n) in tape.nodes[..=loss.0].iter().enumerate() {
        if !n.value.all_finite() {
            return Err(MariError::NonFinite(format!(
                "tape node {i} ({})",
                n.op.name()
            )));
        }
    }
    let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
    grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
    for i in (0..=loss.0).rev() {
        let node = &tape.nodes[i];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        if matches!(node.op, Op::Leaf) {
            grads[i] = Some(g);
            continue;
        }
        propagate(tape, node, &g, &mut grads);
    }
    let mut map = HashMap::new();
    for &p in &tape.params {
        if p.0 > loss.0 {
            map.insert(p, Tensor::zeros(tape.value(p).shape()));
            continue;
        }
        let g = grads[p.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.value(p).shape()));
        map.insert(p, g.reshape(tape.value(p).shape()).expect("gradient shape"));
    }
    Ok(Grads { map })
}

fn propagate(tape: &Tape, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| tape.value(v);
    let ng = |v: Var| tape.nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::MatMul(a, b) => {
            if ng(*a) {
                acc(grads, *a, g.matmul_nt(val(*b)));
            }
            if ng(*b) {
                acc(grads, *b, val(*a).matmul_tn(g));
            }
        }
        Op::Add(a, b) => {
            if ng(*a) {
                acc(grads, *a, g.clone());
            }
            if ng(*b) {
                acc(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if ng(*a) {
                acc(grads, *a, g.clone());
            }
            if ng(*b) {
                acc(grads, *b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if ng(*a) {
                acc(grads, *a, g.zip(val(*b), |x, y| x * y));
            }
            if ng(*b) {
                acc(grads, *b, g.zip(val(*a), |x, y| x * y));
            }
        }
        Op::Div(a, b) => {
            if ng(*a) {
                acc(grads, *a, g.zip(val(*b), |x, y| x / y));
            }
            if ng(*b) {
                let q = node.value.zip(val(*b), |o, y| o / y);
                acc(grads, *b, g.zip(&q, |x, y| -x * y));
            }
        }
        Op::AddRow(a, b) => {
            if ng(*a) {
                acc(grads, *a, g.clone());
            }
            if ng(*b) {
                let mut gb = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, x) in gb.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                acc(grads, *b, Tensor::raw(val(*b).shape().to_vec(), gb));
            }
        }
        Op::MulCol(a, c) => {
            let cv = val(*c);
            if ng(*a) {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let s = cv.data()[i];
                    for x in ga.row_mut(i) {
                        *x *= s;
                    }
                }
                acc(grads, *a, ga.reshape(val(*a).shape()).unwrap());
            }
            if ng(*c) {
                let av = val(*a);
                let gc = (0..g.rows())
                    .map(|i| super::tensor::dot(g.row(i), av.row(i)))
                    .collect();
                acc(grads, *c, Tensor::raw(cv.shape().to_vec(), gc));
            }
        }
        Op::Scale(a, c) => acc(grads, *a, g.scale(*c)),
        Op::Gelu(a) => acc(grads, *a, g.zip(val(*a), |x, y| x * kernels::gelu_grad(y))),
        Op::Sqrt(a) => acc(grads, *a, g.zip(&node.value, |x, s| 0.5 * x / s)),
        Op::LayerNorm {
            x,
            g: gain,
            b,
            cache,
        } => {
            let (n, d) = (g.rows(), g.cols());
            let gv = val(*gain).data();
            if ng(*x) {
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let gy = g.row(i);
                    let xh = cache.xhat.row(i);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        dx[i * d + j] = cache.rstd[i] * (dxh - m1 - xh[j] * m2);
                    }
                }
                acc(grads, *x, Tensor::raw(vec![n, d], dx));
            }
            if ng(*gain) || ng(*b) {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += g.get(i, j) * cache.xhat.get(i, j);
                        db[j] += g.get(i, j);
                    }
                }
                if ng(*gain) {
                    acc(grads, *gain, Tensor::raw(val(*gain).shape().to_vec(), dg));
                }
                if ng(*b) {
                    acc(grads, *b, Tensor::raw(val(*b).shape().to_vec(), db));
                }
            }
        }
        Op::Attention {
            qkv,
            segs,
            heads,
            probs,
        } => {
            acc(
                grads,
                *qkv,
                attention_backward(val(*qkv), segs, *heads, probs, g),
            );
        }
        Op::Embed { table, ids } => {
            let mut gt = Tensor::zeros(val(*table).shape());
            for (k, &id) in ids.iter().enumerate() {
                for (a, b) in gt.row_mut(id).iter_mut().zip(g.row(k)) {
                    *a += b;
                }
            }
            acc(grads, *table, gt);
        }
        Op::GatherRows(a, idx) => {
            let mut ga = Tensor::zeros(&[val(*a).rows(), val(*a).cols()]);
            for (k, &i) in idx.iter().enumerate() {
                for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                    *x += y;
                }
            }
            acc(grads, *a, ga.reshape(val(*a).shape()).unwrap());
        }
        Op::ScatterRows { base, src, idx } => {
            if ng(*base) {
                let mut gb = g.clone();
                for &i in idx {
                    gb.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
                }
                acc(grads, *base, gb.reshape(val(*base).shape()).unwrap());
            }
            if ng(*src) {
                acc(
                    grads,
                    *src,
                    g.gather_rows(idx).reshape(val(*src).shape()).unwrap(),
                );
            }
        }
        Op::GatherCols(a, cols) => {
            let mut ga = Tensor::zeros(&[val(*a).rows(), val(*a).cols()]);
            for (i, c) in cols.iter().enumerate() {
                for (m, &j) in c.iter().enumerate() {
                    let cur = ga.get(i, j);
                    ga.set(i, j, cur + g.get(i, m));
                }
            }
            acc(grads, *a, ga.reshape(val(*a).shape()).unwrap());
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let mut ga = g.clone();
            for i in 0..g.rows() {
                let s: f64 = g.row(i).iter().sum();
                for (gx, yv) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                    *gx -= yv.exp() * s;
                }
            }
            acc(grads, *a, ga);
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let mut ga = g.clone();
            for i in 0..g.rows() {
                let s = super::tensor::dot(g.row(i), y.row(i));
                for (gx, yv) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                    *gx = yv * (*gx - s);
                }
            }
            acc(grads, *a, ga);
        }
        Op::Sum(a) => acc(grads, *a, Tensor::full(val(*a).shape(), g.item())),
        Op::SumCols(a) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(&[av.rows(), av.cols()]);
            for i in 0..av.rows() {
                let s = g.data()[i];
                ga.row_mut(i).iter_mut().for_each(|x| *x = s);
            }
            acc(grads, *a, ga.reshape(av.shape()).unwrap());
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let n = av.rows() as f64;
            let mut ga = Tensor::zeros(&[av.rows(), av.cols()]);
            for i in 0..av.rows() {
                for (x, y) in ga.row_mut(i).iter_mut().zip(g.data()) {
                    *x = y / n;
                }
            }
            acc(grads, *a, ga.reshape(av.shape()).unwrap());
        }
        Op::Transpose(a) => acc(grads, *a, g.transpose()),
        Op::Inverse(a) => {
            let inv_t = node.value.transpose();
            acc(grads, *a, inv_t.matmul(g).matmul(&inv_t).scale(-1.0));
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if ng(p) {
                    let mut gp = Vec::with_capacity(g.rows() * w);
                    for i in 0..g.rows() {
                        gp.extend_from_slice(&g.row(i)[off..off + w]);
                    }
                    acc(grads, p, Tensor::raw(val(p).shape().to_vec(), gp));
                }
                off += w;
            }
        }
        Op::Reshape(a) => acc(grads, *a, g.reshape(val(*a).shape()).unwrap()),
    }
}

fn attention_backward(
    qkv: &Tensor,
    segs: &Segments,
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> Tensor {
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; n * 3 * d];
    let mut p_off = 0;
    let mut dp = Vec::new();
    for (start, &len) in segs.starts().into_iter().zip(&segs.lens) {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let p = &probs[p_off..p_off + len];
                p_off += len;
                let gi = &g.row(start + i)[off..off + dh];
                dp.clear();
                let mut s = 0.0;
                for j in 0..=i {
                    let vj = &qkv.row(start + j)[2 * d + off..2 * d + off + dh];
                    let v = super::tensor::dot(gi, vj);
                    s += p[j] * v;
                    dp.push(v);
                }
                for j in 0..=i {
                    let dv = &mut dqkv
                        [(start + j) * 3 * d + 2 * d + off..(start + j) * 3 * d + 2 * d + off + dh];
                    for (x, y) in dv.iter_mut().zip(gi) {
                        *x += p[j] * y;
                    }
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let qc = qkv.get(start + i, off + c);
                        let kc = qkv.get(start + j, d + off + c);
                        dqkv[(start + i) * 3 * d + off + c] += ds * kc;
                        dqkv[(start + j) * 3 * d + d + off + c] += ds * qc;
                    }
                }
            }
        }
    }
    Tensor::raw(vec![n, 3 * d], dqkv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(3.0));
        let y = t.mul(w, w);
        let g = backward(&t, y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.5, -1.0, 2.0, 0.1];
        let mut t = Tape::new();
        let w = t.param(Tensor::matrix(1, 4, logits.clone()).unwrap());
        let lp = t.log_softmax(w);
        let pick = t.gather_cols(lp, &[vec![2]]);
        let loss = t.scale(pick, -1.0);
        let loss = t.sum(loss);
        let g = backward(&t, loss).unwrap();
        let p = kernels::softmax_row(&logits);
        for j in 0..4 {
            let expect = p[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.get(w).unwrap().data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(backward(&t, w), Err(MariError::Contract(_))));
    }

    #[test]
    fn frozen_and_detached_receive_nothing() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let d = t.detach(w);
        let a = t.mul(w, c);
        let b = t.mul(d, w);
        let s = t.add(a, b);
        let g = backward(&t, s).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(w).unwrap().item(), 5.0 + 2.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn nonfinite_node_is_reported() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(-1.0));
        let s = t.sqrt(w);
        let err = backward(&t, s).unwrap_err();
        assert!(err.to_string().contains("sqrt"));
    }
}
