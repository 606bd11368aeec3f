//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates adjoints. Nodes built only from
//! constants are never visited during the backward pass.
//!
//! Shape errors inside the tape are programming errors and panic; public
//! domain operations validate their inputs before building graph nodes.

use std::sync::Arc;

use crate::sparse::SparseMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Linear(Var, Arc<SparseMap>),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.same_shape(a, b, what);
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn offset(&mut self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "offset: operand shapes differ");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// Adds the vector `row` (shape `[m]`) to every row of the `[n, m]` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = dims2(self.value(a));
        assert_eq!(self.value(row).len(), m, "add_row: row length");
        let va = self.value(a).data();
        let vr = self.value(row).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend((0..m).map(|j| va[i * m + j] + vr[j]));
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Tensor::new(vec![n, m], data).unwrap(), Op::AddRow(a, row), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.value(a));
        let (k2, m) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = dims2(self.value(a));
        let out = transpose_raw(self.value(a).data(), n, m);
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = dims2(self.value(a));
        let va = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &va[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o /= z;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::SoftmaxRows(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Maximum element; the gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        assert!(!v.is_empty(), "max of empty tensor");
        let mut idx = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[idx] {
                idx = i;
            }
        }
        let m = v[idx];
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Max(a, idx), rg)
    }

    /// Applies a constant sparse linear map to the flattened input.
    pub fn linear(&mut self, a: Var, map: &Arc<SparseMap>, shape: Vec<usize>) -> Var {
        let out = map.apply(self.value(a).data());
        let out = Tensor::new(shape, out).expect("linear: output shape");
        let rg = self.rg(a);
        self.push(out, Op::Linear(a, Arc::clone(map)), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.value(a).clone().reshaped(shape).expect("reshape");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Concatenates the flattened inputs into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rg |= self.rg(p);
        }
        let n = data.len();
        self.push(Tensor::new(vec![n], data).unwrap(), Op::Concat(parts.to_vec()), rg)
    }

    /// A contiguous slice of the flattened input, reshaped to `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: Vec<usize>) -> Var {
        let len: usize = shape.iter().product();
        let data = self.value(a).data()[start..start + len].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Slice(a, start), rg)
    }

    /// Cosine similarity of the flattened inputs.
    ///
    /// Computed as `a·b / sqrt(|a|² |b|²)`, which is exactly `1.0` for
    /// bit-identical inputs; the backward pass is exactly zero there.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "cosine");
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let (dot, na2, nb2) = cosine_parts(va, vb);
        assert!(na2 > 0.0 && nb2 > 0.0, "cosine of a zero vector");
        let c = dot / (na2 * nb2).sqrt();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(c), Op::Cosine(a, b), rg)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| {
                    acc.iter_mut().zip(g).for_each(|(s, &gi)| *s -= gi)
                });
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] / vb[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut().zip(g).for_each(|(x, &gi)| *x += s * gi)
                });
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                let m = self.value(*row).len();
                self.accumulate(grads, *row, |acc| {
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % m] += gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let (_, m) = dims2(self.value(*b));
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.accumulate(grads, *a, |acc| {
                    // dA = G Bᵀ
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * vb[p * m + j];
                            }
                            acc[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    // dB = Aᵀ G
                    for i in 0..n {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                acc[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = dims2(self.value(*a));
                self.accumulate(grads, *a, |acc| {
                    // y is [m, n]
                    for i in 0..n {
                        for j in 0..m {
                            acc[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = dims2(&node.value);
                self.accumulate(grads, *a, |acc| {
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(p, q)| p * q).sum();
                        for j in r {
                            acc[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * y[i];
                }
            }),
            Op::Square(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += 2.0 * va[i] * g[i];
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        if va[i] >= *lo && va[i] <= *hi {
                            acc[i] += g[i];
                        }
                    }
                })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Max(a, idx) => self.accumulate(grads, *a, |acc| acc[*idx] += g[0]),
            Op::Linear(a, map) => self.accumulate(grads, *a, |acc| map.apply_transpose_into(g, acc)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |acc| add_into(acc, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Slice(a, start) => {
                let len = g.len();
                self.accumulate(grads, *a, |acc| add_into(&mut acc[*start..*start + len], g));
            }
            Op::Cosine(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let (_, na2, nb2) = cosine_parts(va, vb);
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let c = y[0];
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[0] * (vb[i] / nb - c * va[i] / na) / na;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[0] * (va[i] / na - c * vb[i] / nb) / nb;
                    }
                });
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    (dot, na2, nb2)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, shape: &[usize], x: &[f64]) {
        let mut g = Graph::new();
        let v = g.param(t(shape, x));
        let out = build(&mut g, v);
        let analytic = g.backward(out).wrt(v);
        let f = |xs: &[f64]| {
            let mut g = Graph::new();
            let v = g.param(t(shape, xs));
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let numeric = numeric_grad(&f, x);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 + 1e-5 * n.abs(), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_chain_gradients() {
        let x = [0.3, -0.2, 0.8, 0.1, -0.6, 0.45];
        check(
            |g, v| {
                let a = g.tanh(v);
                let b = g.sigmoid(v);
                let c = g.mul(a, b);
                let d = g.exp(c);
                let e = g.square(d);
                let f = g.div(e, b);
                let h = g.sub(f, a);
                g.mean(h)
            },
            &[6],
            &x,
        );
    }

    #[test]
    fn matrix_gradients() {
        let x = [0.3, -0.2, 0.8, 0.1, -0.6, 0.45];
        check(
            |g, v| {
                let w = g.constant(t(&[3, 2], &[0.5, -1.0, 0.25, 0.75, -0.3, 0.2]));
                let p = g.matmul(v, w);
                let pt = g.transpose(p);
                let q = g.matmul(pt, v);
                let bias = g.constant(t(&[3], &[0.1, 0.2, -0.3]));
                let r = g.add_row(q, bias);
                let s = g.softmax_rows(r);
                let m = g.max(s);
                let tot = g.sum(s);
                g.add(m, tot)
            },
            &[2, 3],
            &x,
        );
    }

    #[test]
    fn cosine_gradient_and_exact_identity() {
        let x = [0.3, -0.2, 0.8, 0.1];
        check(
            |g, v| {
                let b = g.constant(t(&[4], &[0.2, 0.1, -0.5, 0.9]));
                g.cosine(v, b)
            },
            &[4],
            &x,
        );

        let mut g = Graph::new();
        let a = g.param(t(&[3], &[0.1234567, 0.7654321, 0.3333333]));
        let b = g.constant(t(&[3], &[0.1234567, 0.7654321, 0.3333333]));
        let c = g.cosine(a, b);
        assert_eq!(g.value(c).item(), 1.0);
        assert!(g.backward(c).wrt(a).data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let p = g.mul(a, c);
        let grads = g.backward(p);
        assert_eq!(grads.wrt(a).item(), 3.0);
        assert_eq!(grads.wrt(c).item(), 0.0);
    }

    #[test]
    fn slice_concat_clamp_gradients() {
        let x = [0.3, -0.2, 0.8, 0.1, -0.6, 0.45];
        check(
            |g, v| {
                let a = g.slice(v, 1, vec![3]);
                let b = g.slice(v, 3, vec![3]);
                let c = g.concat(&[a, b]);
                let d = g.clamp(c, -0.5, 0.5);
                let e = g.scale(d, 3.0);
                let f = g.add_scalar(e, 1.0);
                let sq = g.square(f);
                g.sum(sq)
            },
            &[6],
            &x,
        );
    }
}
