//! Minimal reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients for every node that depends on a parameter leaf. Parameter
//! values are borrowed, not copied, so building a graph over a large
//! parameter set is cheap.
//!
//! The tape can be rewound with [`Tape::truncate`], which lets a sampler build
//! the condition-dependent prefix of a network once and replay only the
//! per-step suffix.

use std::borrow::Cow;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Mse(Var, Vec<S>),
    NormalizeRows(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

// out[n,m] += a[n,k] * b[k,m]
fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[k,m] += a[n,k]^T * g[n,m]
fn gemm_at_b_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for p in 0..n {
        let grow = &g[p * m..(p + 1) * m];
        for i in 0..k {
            let av = a[p * k + i];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 2, "autodiff values are rank 2, got {:?}", t.shape());
        (t.rows(), t.cols())
    }

    /// Differentiable leaf borrowing a parameter tensor.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf (inputs, targets, fixed embeddings).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![S::zero(); n * m];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(&[a, b]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add: shapes differ");
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` value.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.dims(a);
        assert_eq!(self.dims(row), (1, m), "add_row expects a [1, {m}] row");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for (o, &rv) in out[i * m..(i + 1) * m].iter_mut().zip(&r) {
                *o += rv;
            }
        }
        let ng = self.needs(&[a, row]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |&x, &y| x * y).expect("mul: shapes differ");
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).scale(k);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|&x| x * sigmoid(x));
        let ng = self.needs(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, m) = self.dims(a);
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            softmax_row(row);
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let out = transpose(self.value(a).data(), n, m);
        let ng = self.needs(&[a]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Transpose(a), ng)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (n, m) = self.dims(a);
        assert!(start + width <= m, "slice_cols out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + width]);
        }
        let ng = self.needs(&[a]);
        self.push(Tensor::from_parts(vec![n, width], out), Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, n, "concat_cols row counts differ");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let m = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            assert_eq!(c, m, "concat_rows column counts differ");
            out.extend_from_slice(self.value(p).data());
            n += r;
        }
        let ng = self.needs(parts);
        self.push(Tensor::from_parts(vec![n, m], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column means, shape `[1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let inv = S::one() / S::from_usize(n).expect("row count");
        let mut out = vec![S::zero(); m];
        for row in self.value(a).data().chunks(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.needs(&[a]);
        self.push(Tensor::from_parts(vec![1, m], out), Op::MeanRows(a), ng)
    }

    /// Rows of `table` selected by `indices` (an embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let (v, m) = self.dims(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            assert!(i < v, "gather index {i} out of {v} rows");
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let ng = self.needs(&[table]);
        self.push(Tensor::from_parts(vec![indices.len(), m], out), Op::Gather(table, indices.to_vec()), ng)
    }

    /// Mean squared error against a constant target, shape `[1, 1]`.
    pub fn mse(&mut self, a: Var, target: &[S]) -> Var {
        let pred = self.value(a).data();
        assert_eq!(pred.len(), target.len(), "mse target size differs");
        let sum: S = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let loss = sum / S::from_usize(pred.len()).expect("element count");
        let ng = self.needs(&[a]);
        self.push(Tensor::from_parts(vec![1, 1], vec![loss]), Op::Mse(a, target.to_vec()), ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (_, m) = self.dims(a);
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let ng = self.needs(&[a]);
        self.push(out, Op::NormalizeRows(a), ng)
    }

    /// Mean over rows of the softmax cross-entropy of each row against its
    /// label column, shape `[1, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, m) = self.dims(logits);
        assert_eq!(n, labels.len(), "one label per row");
        let mut total = S::zero();
        for (row, &label) in self.value(logits).data().chunks(m).zip(labels) {
            let max = row.iter().fold(S::neg_infinity(), |mx, &v| mx.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[label];
        }
        let loss = total / S::from_usize(n).expect("row count");
        let ng = self.needs(&[logits]);
        self.push(Tensor::from_parts(vec![1, 1], vec![loss]), Op::CrossEntropy(logits, labels.to_vec()), ng)
    }

    /// Reverse pass from a `[1, 1]` loss node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward starts from a scalar");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a, S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if needs(*a) {
                    let bt = transpose(self.value(*b).data(), k, m);
                    acc(*a, &mut |da| gemm_acc(g, &bt, da, n, m, k));
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    acc(*b, &mut |db| gemm_at_b_acc(av, g, db, n, k, m));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let m = self.dims(*row).1;
                acc(*row, &mut |d| {
                    for grow in g.chunks(m) {
                        d.iter_mut().zip(grow).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += *k * y));
            }
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |d| {
                    for ((x, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(xi);
                        *x += gy * s * (S::one() + xi * (S::one() - s));
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let m = self.dims(*a).1;
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for ((x, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = self.dims(*a);
                let gt = transpose(g, m, n);
                acc(*a, &mut |d| d.iter_mut().zip(&gt).for_each(|(x, &y)| *x += y));
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims(*a);
                let w = node.value.cols();
                acc(*a, &mut |d| {
                    for i in 0..n {
                        for j in 0..w {
                            d[i * m + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    acc(p, &mut |d| {
                        for i in 0..n {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| {
                        d.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, &y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::MeanRows(a) => {
                let (n, m) = self.dims(*a);
                let inv = S::one() / S::from_usize(n).expect("row count");
                acc(*a, &mut |d| {
                    for drow in d.chunks_mut(m) {
                        drow.iter_mut().zip(g).for_each(|(x, &y)| *x += y * inv);
                    }
                });
            }
            Op::Gather(table, indices) => {
                let m = self.dims(*table).1;
                acc(*table, &mut |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            d[i * m + j] += g[r * m + j];
                        }
                    }
                });
            }
            Op::Mse(a, target) => {
                let pred = self.value(*a).data();
                let k = S::lit(2.0) * g[0] / S::from_usize(pred.len()).expect("element count");
                acc(*a, &mut |d| {
                    for ((x, &p), &t) in d.iter_mut().zip(pred).zip(target) {
                        *x += k * (p - t);
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let m = self.dims(*a).1;
                let xv = self.value(*a).data();
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for (((drow, grow), yrow), xrow) in
                        d.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)).zip(xv.chunks(m))
                    {
                        let norm = xrow.iter().map(|&v| v * v).sum::<S>().sqrt();
                        let dot: S = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for ((x, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += (gi - yi * dot) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, labels) => {
                let (n, m) = self.dims(*logits);
                let lv = self.value(*logits).data();
                let k = g[0] / S::from_usize(n).expect("row count");
                acc(*logits, &mut |d| {
                    for ((drow, lrow), &label) in d.chunks_mut(m).zip(lv.chunks(m)).zip(labels) {
                        let mut p = lrow.to_vec();
                        softmax_row(&mut p);
                        for (j, (x, pj)) in drow.iter_mut().zip(p).enumerate() {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            *x += k * (pj - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_tensor, stream};

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        gaussian_tensor(&[rows, cols], &mut stream(seed))
    }

    /// Checks every entry of every parameter against central differences.
    fn check(params: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let analytic: Vec<Vec<f64>> = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
            let loss = f(&mut tape, &vars);
            let grads = tape.backward(loss);
            vars.iter()
                .zip(params)
                .map(|(&v, p)| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
                .collect()
        };
        let eval = |ps: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
            let loss = f(&mut tape, &vars);
            tape.value(loss).data()[0]
        };
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[pi][j];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-6, "param {pi}[{j}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_add_row_silu_mse() {
        let target = t(3, 2, 9).into_data();
        check(&[t(3, 4, 1), t(4, 2, 2), t(1, 2, 3)], |tape, v| {
            let h = tape.matmul(v[0], v[1]);
            let h = tape.add_row(h, v[2]);
            let h = tape.silu(h);
            tape.mse(h, &target)
        });
    }

    #[test]
    fn attention_shaped_graph() {
        let target = t(2, 3, 7).into_data();
        check(&[t(2, 4, 1), t(5, 4, 2), t(4, 3, 3)], |tape, v| {
            let kt = tape.transpose(v[1]);
            let s = tape.matmul(v[0], kt);
            let s = tape.scale(s, 0.5);
            let a = tape.softmax_rows(s);
            let vals = tape.matmul(v[1], v[2]);
            let o = tape.matmul(a, vals);
            tape.mse(o, &target)
        });
    }

    #[test]
    fn slicing_concatenation_and_gather() {
        let target = t(3, 5, 4).into_data();
        check(&[t(2, 6, 1), t(4, 3, 2), t(1, 3, 3)], |tape, v| {
            let left = tape.slice_cols(v[0], 1, 3);
            let emb = tape.gather(v[1], &[3, 0, 3]);
            let pooled = tape.mean_rows(emb);
            let gated = tape.mul(v[2], pooled);
            let stacked = tape.concat_rows(&[left, gated]);
            let extra = tape.slice_cols(stacked, 0, 2);
            let wide = tape.concat_cols(&[stacked, extra]);
            tape.mse(wide, &target)
        });
    }

    #[test]
    fn normalized_contrastive_loss() {
        check(&[t(4, 3, 1), t(4, 3, 2)], |tape, v| {
            let a = tape.normalize_rows(v[0]);
            let b = tape.normalize_rows(v[1]);
            let bt = tape.transpose(b);
            let logits = tape.matmul(a, bt);
            let logits = tape.scale(logits, 3.0);
            let l1 = tape.cross_entropy(logits, &[0, 1, 2, 3]);
            let lt = tape.transpose(logits);
            let l2 = tape.cross_entropy(lt, &[0, 1, 2, 3]);
            let s = tape.add(l1, l2);
            tape.scale(s, 0.5)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = t(3, 2, 1);
        let mut tape = Tape::new();
        let x = tape.constant(t(4, 3, 2));
        let wv = tape.param(&w);
        let y = tape.matmul(x, wv);
        let loss = tape.mse(y, &[0.0; 8]);
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        assert!(grads.get(wv).is_some());
    }

    #[test]
    fn truncate_rewinds_the_tape() {
        let w = t(2, 2, 1);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let mark = tape.len();
        let a = tape.matmul(wv, wv);
        let first = tape.value(a).clone();
        tape.truncate(mark);
        let b = tape.matmul(wv, wv);
        assert_eq!(a, b);
        assert_eq!(&first, tape.value(b));
    }
}
