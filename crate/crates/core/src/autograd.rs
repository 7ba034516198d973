//! A small reverse-mode tape over dense matrices.
//!
//! Every forward pass builds a fresh [`Graph`] borrowing an immutable
//! [`ParamStore`]; `backward` writes parameter gradients into a
//! [`ParamGrads`] buffer aligned with the store. Graphs are cheap and
//! single-use, so distinct documents can be differentiated concurrently.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{gemm_acc, Mat, Scalar};

/// Named tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat<T> {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Mat<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads { tensors: self.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Mat<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, f: T) {
        for t in &mut self.tensors {
            t.scale(f);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Mask(Var, Mat<T>),
    Gelu(Var),
    Softplus(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    SoftTargetCe { probs: Mat<T>, target: Vec<T> },
    IndexCe { probs: Mat<T>, targets: Vec<usize>, input: Var },
    AddN(Vec<Var>),
}

struct Node<T> {
    value: Option<Mat<T>>,
    op: Op<T>,
}

/// Row-wise attention mask: `allowed[r * cols + c]`.
pub type AttnMask = Arc<Vec<bool>>;

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
    kd_inputs: HashMap<usize, Var>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout: None,
            kd_inputs: HashMap::new(),
        }
    }

    /// Enables dropout with the given rate, drawing masks from `rng`.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(false, self.value(b), false);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(false, self.value(b), true);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, b.cols);
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += *bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, a: Var, f: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale(f);
        self.push(out, Op::Scale(a, f))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, m: Mat<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), m.shape());
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().zip(&m.data).map(|(a, b)| *a * *b).collect());
        self.push(out, Op::Mask(a, m))
    }

    /// Inverted dropout; identity when the graph has no dropout configured.
    pub fn dropout(&mut self, a: Var) -> Var {
        if self.dropout.is_none() {
            return a;
        }
        let (rows, cols) = self.value(a).shape();
        let (rate, rng) = self.dropout.as_mut().unwrap();
        let rate = *rate;
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = Mat::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < rate { T::zero() } else { keep });
        self.mul_const(a, mask)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row-wise softmax. Entries where `mask` is false receive exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<AttnMask>) -> Var {
        let out = softmax_rows(self.value(x), mask.as_deref().map(Vec::as_slice));
        self.push(out, Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let out = Mat::from_fn(xv.rows, len, |r, c| xv.get(r, start + c));
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let out = Mat::from_vec(len, xv.cols, xv.data[start * xv.cols..(start + len) * xv.cols].to_vec());
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols);
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let out = Mat::from_vec(ids.len(), t.cols, data);
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += *v;
            }
        }
        self.push(out, Op::SumRows(x))
    }

    /// Column maxima as a `1 × cols` row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::from_vec(1, xv.cols, xv.row(0).to_vec());
        let mut arg = vec![0; xv.cols];
        for r in 1..xv.rows {
            for c in 0..xv.cols {
                if xv.get(r, c) > out.data[c] {
                    out.data[c] = xv.get(r, c);
                    arg[c] = r;
                }
            }
        }
        self.push(out, Op::MaxRows(x, arg))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out.add_assign(self.value(*p));
        }
        self.push(out, Op::AddN(parts.to_vec()))
    }

    /// Cross entropy `-Σ q_n log softmax(logits)_n` over a `1 × N` logit row.
    /// Positions with `valid[n] == false` are excluded from the softmax and
    /// must carry zero target mass.
    pub fn soft_target_ce(&mut self, logits: Var, target: &[T], valid: Option<&[bool]>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, 1);
        assert_eq!(lv.cols, target.len());
        let probs = softmax_rows(lv, valid);
        let lse = log_sum_exp(lv.row(0), valid);
        let mut loss = T::zero();
        for (n, &q) in target.iter().enumerate() {
            if q > T::zero() {
                loss += q * (lse - lv.get(0, n));
            }
        }
        let v = self.push(Mat::from_vec(1, 1, vec![loss]), Op::SoftTargetCe { probs, target: target.to_vec() });
        self.kd_inputs.insert(v.0, logits);
        v
    }

    /// Mean over rows of `-log softmax(logits_r)[targets_r]`.
    pub fn index_ce(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let probs = softmax_rows(lv, None);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            loss += log_sum_exp(lv.row(r), None) - lv.get(r, t);
        }
        loss = loss / T::of(targets.len().max(1) as f64);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::IndexCe { probs, targets: targets.to_vec(), input: logits })
    }

    /// Reverse pass from a `1 × 1` output, accumulating into `grads`.
    pub fn backward(&self, output: Var, grads: &mut ParamGrads<T>) {
        self.backward_inputs(output, grads, &[]);
    }

    /// Like [`Graph::backward`], additionally returning the gradient that
    /// reaches each of `wrt` (zeros when none does).
    pub fn backward_inputs(&self, output: Var, grads: &mut ParamGrads<T>, wrt: &[Var]) -> Vec<Mat<T>> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut captured: Vec<Mat<T>> = wrt.iter().map(|v| {
            let (r, c) = self.value(*v).shape();
            Mat::zeros(r, c)
        }).collect();
        let mut g: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[output.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));
        for i in (0..=output.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            for (k, v) in wrt.iter().enumerate() {
                if v.0 == i {
                    captured[k] = gi.clone();
                }
            }
            self.backprop_node(i, gi, &mut g, grads);
        }
        captured
    }

    fn backprop_node(&self, i: usize, gi: Mat<T>, g: &mut [Option<Mat<T>>], grads: &mut ParamGrads<T>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => grads.tensors[*id].add_assign(&gi),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc_with(g, *a, av.rows, av.cols, |m| gemm_acc(&gi, false, bv, true, T::one(), m));
                acc_with(g, *b, bv.rows, bv.cols, |m| gemm_acc(av, true, &gi, false, T::one(), m));
            }
            Op::MatMulT(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc_with(g, *a, av.rows, av.cols, |m| gemm_acc(&gi, false, bv, false, T::one(), m));
                acc_with(g, *b, bv.rows, bv.cols, |m| gemm_acc(&gi, true, av, false, T::one(), m));
            }
            Op::Add(a, b) => {
                acc(g, *a, &gi);
                acc(g, *b, &gi);
            }
            Op::AddBias(x, bias) => {
                let mut gb = Mat::zeros(1, gi.cols);
                for r in 0..gi.rows {
                    for (o, v) in gb.data.iter_mut().zip(gi.row(r)) {
                        *o += *v;
                    }
                }
                acc(g, *bias, &gb);
                acc_owned(g, *x, gi);
            }
            Op::Scale(a, f) => {
                let mut ga = gi;
                ga.scale(*f);
                acc_owned(g, *a, ga);
            }
            Op::Mask(a, m) => {
                let mut ga = gi;
                for (v, k) in ga.data.iter_mut().zip(&m.data) {
                    *v *= *k;
                }
                acc_owned(g, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = gi;
                for (v, &xv) in ga.data.iter_mut().zip(&x.data) {
                    *v *= gelu(xv).1;
                }
                acc_owned(g, *a, ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let mut ga = gi;
                for (v, &xv) in ga.data.iter_mut().zip(&x.data) {
                    *v *= sigmoid(xv);
                }
                acc_owned(g, *a, ga);
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().unwrap();
                let mut ga = gi;
                for (v, &yv) in ga.data.iter_mut().zip(&y.data) {
                    *v *= T::one() - yv * yv;
                }
                acc_owned(g, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                let n = T::of(cols as f64);
                let mut ggamma = Mat::zeros(1, cols);
                let mut gbeta = Mat::zeros(1, cols);
                let mut gx = Mat::zeros(rows, cols);
                for r in 0..rows {
                    let dy = gi.row(r);
                    let xh = xhat.row(r);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        ggamma.data[c] += dy[c] * xh[c];
                        gbeta.data[c] += dy[c];
                        let d = dy[c] * gv.data[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                    }
                    let is = inv_std[r];
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        let d = dy[c] * gv.data[c];
                        out[c] = is * (d - sum_d / n - xh[c] * sum_dx / n);
                    }
                }
                acc_owned(g, *gamma, ggamma);
                acc_owned(g, *beta, gbeta);
                acc_owned(g, *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.as_ref().unwrap();
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = gi.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc_owned(g, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (start, rows, cols) = (*start, xv.rows, xv.cols);
                acc_with(g, *x, rows, cols, |m| {
                    for r in 0..gi.rows {
                        for (o, v) in m.row_mut(r)[start..start + gi.cols].iter_mut().zip(gi.row(r)) {
                            *o += *v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols;
                    let part = Mat::from_fn(gi.rows, pc, |r, c| gi.get(r, off + c));
                    acc_owned(g, *p, part);
                    off += pc;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let (start, rows, cols) = (*start, xv.rows, xv.cols);
                acc_with(g, *x, rows, cols, |m| {
                    for (o, v) in m.data[start * cols..(start + gi.rows) * cols].iter_mut().zip(&gi.data) {
                        *o += *v;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pr = self.value(*p).rows;
                    let cols = gi.cols;
                    let part = Mat::from_vec(pr, cols, gi.data[off * cols..(off + pr) * cols].to_vec());
                    acc_owned(g, *p, part);
                    off += pr;
                }
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let (rows, cols) = tv.shape();
                // Scatter straight into the parameter gradient when possible.
                if let Op::Param(pid) = self.nodes[table.0].op {
                    let dst = &mut grads.tensors[pid];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in dst.row_mut(id).iter_mut().zip(gi.row(r)) {
                            *o += *v;
                        }
                    }
                } else {
                    acc_with(g, *table, rows, cols, |m| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, v) in m.row_mut(id).iter_mut().zip(gi.row(r)) {
                                *o += *v;
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => acc_owned(g, *x, gi.transpose()),
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let gx = Mat::from_fn(xv.rows, xv.cols, |_, c| gi.data[c]);
                acc_owned(g, *x, gx);
            }
            Op::MaxRows(x, arg) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.shape();
                acc_with(g, *x, rows, cols, |m| {
                    for (c, &r) in arg.iter().enumerate() {
                        let cur = m.get(r, c);
                        m.set(r, c, cur + gi.data[c]);
                    }
                });
            }
            Op::SoftTargetCe { probs, target } => {
                let logits = self.kd_inputs[&i];
                let up = gi.data[0];
                let mass: T = target.iter().copied().sum();
                // d/dz of -Σ q log softmax(z) = p·Σq − q
                let gx = Mat::from_fn(1, probs.cols, |_, c| up * (probs.data[c] * mass - target[c]));
                acc_owned(g, logits, gx);
            }
            Op::IndexCe { probs, targets, input } => {
                let up = gi.data[0] / T::of(targets.len().max(1) as f64);
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let cur = gx.get(r, t);
                    gx.set(r, t, cur - T::one());
                }
                gx.scale(up);
                acc_owned(g, *input, gx);
            }
            Op::AddN(parts) => {
                for p in parts {
                    acc(g, *p, &gi);
                }
            }
        }
    }
}

fn acc<T: Scalar>(g: &mut [Option<Mat<T>>], v: Var, m: &Mat<T>) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(m),
        slot => *slot = Some(m.clone()),
    }
}

fn acc_owned<T: Scalar>(g: &mut [Option<Mat<T>>], v: Var, m: Mat<T>) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&m),
        slot => *slot = Some(m),
    }
}

fn acc_with<T: Scalar>(g: &mut [Option<Mat<T>>], v: Var, rows: usize, cols: usize, f: impl FnOnce(&mut Mat<T>)) {
    let slot = &mut g[v.0];
    if slot.is_none() {
        *slot = Some(Mat::zeros(rows, cols));
    }
    f(slot.as_mut().unwrap());
}

/// Tanh-approximated GELU and its derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T], valid: Option<&[bool]>) -> T {
    let ok = |i: usize| valid.map_or(true, |v| v[i]);
    let max = row.iter().enumerate().filter(|(i, _)| ok(*i)).map(|(_, v)| *v).fold(T::neg_infinity(), T::max);
    let s: T = row.iter().enumerate().filter(|(i, _)| ok(*i)).map(|(_, v)| (*v - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax; `mask` is either one flag per column (shared by all
/// rows) or one flag per entry.
pub(crate) fn softmax_rows<T: Scalar>(x: &Mat<T>, mask: Option<&[bool]>) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let allowed = |c: usize| match mask {
            None => true,
            Some(m) if m.len() == x.cols => m[c],
            Some(m) => m[r * x.cols + c],
        };
        let row = x.row(r);
        let max = (0..x.cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let o = out.row_mut(r);
        let mut sum = T::zero();
        for c in 0..x.cols {
            if allowed(c) {
                let e = (row[c] - max).exp();
                o[c] = e;
                sum += e;
            }
        }
        for v in o.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(store: &ParamStore<f64>, id: usize, f: impl Fn(&ParamStore<f64>) -> f64) -> Mat<f64> {
        let eps = 1e-6;
        let base = store.get(id).clone();
        let mut out = Mat::zeros(base.rows, base.cols);
        for k in 0..base.len() {
            let mut s = store.clone();
            s.get_mut(id).data[k] += eps;
            let plus = f(&s);
            s.get_mut(id).data[k] -= 2.0 * eps;
            let minus = f(&s);
            out.data[k] = (plus - minus) / (2.0 * eps);
        }
        out
    }

    fn check(store: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> Var) {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let mut grads = store.zero_grads();
        g.backward(out, &mut grads);
        for id in 0..store.len() {
            let num = numeric_grad(store, id, |s| {
                let mut g = Graph::new(s);
                let o = f(&mut g);
                g.value(o).data[0]
            });
            for (a, n) in grads.tensors[id].data.iter().zip(&num.data) {
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "param {id}: {a} vs {n}");
            }
        }
    }

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("x", Mat::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6));
        s.push("w", Mat::from_fn(4, 4, |r, c| ((r * 5 + c * 2) % 7) as f64 * 0.1 - 0.3));
        s.push("gamma", Mat::from_fn(1, 4, |_, c| 1.0 + 0.1 * c as f64));
        s.push("beta", Mat::from_fn(1, 4, |_, c| 0.05 * c as f64));
        s
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let s = store();
        check(&s, |g| {
            let x = g.param(0);
            let w = g.param(1);
            let h = g.matmul(x, w);
            let gm = g.param(2);
            let bt = g.param(3);
            let h = g.layer_norm(h, gm, bt);
            let h = g.gelu(h);
            let sc = g.matmul_t(h, x);
            let mask: AttnMask = Arc::new(vec![true, false, true]);
            let p = g.softmax(sc, Some(mask));
            let o = g.matmul(p, x);
            let left = g.slice_cols(o, 0, 2);
            let right = g.slice_cols(o, 2, 2);
            let right = g.tanh(right);
            let cat = g.concat_cols(&[right, left]);
            let pooled = g.sum_rows(cat);
            let mx = g.max_rows(cat);
            let both = g.add(pooled, mx);
            let both = g.softplus(both);
            g.soft_target_ce(both, &[0.1, 0.2, 0.3, 0.4], None)
        });
    }

    #[test]
    fn gather_rows_and_index_ce_gradients() {
        let s = store();
        check(&s, |g| {
            let t = g.param(1);
            let e = g.gather(t, &[2, 0, 2]);
            let bias = g.param(3);
            let e = g.add_bias(e, bias);
            let a = g.slice_rows(e, 0, 1);
            let b = g.slice_rows(e, 1, 2);
            let b = g.scale(b, 0.5);
            let cat = g.concat_rows(&[b, a]);
            let tr = g.transpose(cat);
            let tr = g.transpose(tr);
            g.index_ce(tr, &[1, 3, 0])
        });
    }

    #[test]
    fn masked_soft_target_ce_gives_zero_mass_to_padding() {
        let s = store();
        let mut g = Graph::new(&s);
        let l = g.input(Mat::row_vector(vec![0.5, 3.0, -1.0]));
        let loss = g.soft_target_ce(l, &[0.25, 0.0, 0.75], Some(&[true, false, true]));
        let p = softmax_rows(g.value(l), Some(&[true, false, true]));
        assert_eq!(p.data[1], 0.0);
        let expected = -(0.25 * p.data[0].ln() + 0.75 * p.data[2].ln());
        assert!((g.value(loss).data[0] - expected).abs() < 1e-12);
    }
}
