//! Dynamic reverse-mode tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Node inputs always precede the node, so a single
//! reverse sweep visits each node once in topological order.

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    EmbeddingMean {
        table: Var,
        ids: Vec<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// `-log softmax(logits)[target]` with max-subtraction.
pub fn softmax_cross_entropy<T: Float>(logits: &[T], target: usize) -> Result<T> {
    if logits.is_empty() {
        return Err(AutodiffError::Empty("softmax_cross_entropy"));
    }
    if target >= logits.len() {
        return Err(AutodiffError::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    Ok(sum.ln() - (logits[target] - max))
}

fn rank2<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul_nt", self.value(a))?;
        let (n, k2) = rank2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = rank2("add_bias", self.value(x))?;
        if self.value(bias).len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, bias), rg))
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| gelu_scalar(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization of `[m,n]` with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = if xv.shape().len() == 1 {
            (1, xv.len())
        } else {
            rank2("layer_norm", xv)?
        };
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::from_f64(n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2("l2_normalize", self.value(x))?;
        let floor = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks_exact(n) {
            let norm = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|&e| e / norm));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::L2Normalize { x, norms }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let m = rank2("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2("concat_cols", self.value(p))?;
            if r != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of an `[m,n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rank2("slice_cols", self.value(x))?;
        if start >= end || end > n {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, end],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for row in src.chunks_exact(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![m, end - start], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Row `i` of the output is the mean of `table` rows listed in `ids[i]`.
    pub fn embedding_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let (rows, dim) = rank2("embedding_mean", self.value(table))?;
        if ids.is_empty() {
            return Err(AutodiffError::Empty("embedding_mean"));
        }
        let t = self.value(table).data();
        let mut out = vec![T::zero(); ids.len() * dim];
        for (seq, acc) in ids.iter().zip(out.chunks_exact_mut(dim)) {
            if seq.is_empty() {
                return Err(AutodiffError::Empty("embedding_mean row"));
            }
            for &id in seq {
                if id >= rows {
                    return Err(AutodiffError::IndexOutOfRange { index: id, rows });
                }
                for (a, &v) in acc.iter_mut().zip(&t[id * dim..(id + 1) * dim]) {
                    *a += v;
                }
            }
            let inv = T::one() / T::from_f64(seq.len() as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let m = ids.len();
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![m, dim], out)?,
            Op::EmbeddingMean { table, ids },
            rg,
        ))
    }

    /// Mean over rows of softmax cross-entropy against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = rank2("cross_entropy", self.value(logits))?;
        if targets.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, c],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = Vec::with_capacity(m * c);
        let mut total = T::zero();
        for (row, &t) in self.value(logits).data().chunks_exact(c).zip(targets) {
            if t >= c {
                return Err(AutodiffError::TargetOutOfRange {
                    target: t,
                    classes: c,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&l| (l - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            total += sum.ln() - (row[t] - max);
            probs.extend(exps.iter().map(|&e| e / sum));
        }
        let loss = total / T::from_f64(m as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::from_f64(p.len() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Empty("sum"));
        }
        let mut total = T::zero();
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
            }
            total += v.item();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.rg(*a) {
                    // dA = G B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize,
                        T::zero(), &mut da, k as isize, 1,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1,
                        T::zero(), &mut db, n as isize, 1,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                if self.rg(*a) {
                    // dA = G B
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), k as isize, 1,
                        T::zero(), &mut da, k as isize, 1,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(*b) {
                    // dB = G^T A
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(
                        n, m, k, T::one(), g.data(), 1, n as isize, va.data(), k as isize, 1,
                        T::zero(), &mut db, k as isize, 1,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db).unwrap());
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g.data()[j * m + i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let n = g.cols();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let data = g.data().iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Gelu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (grow, hrow) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, dg).unwrap());
                    self.accumulate(grads, *bias, Tensor::new(bs, db).unwrap());
                }
                if self.rg(*x) {
                    let nf = T::from_f64(n as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &r) in g
                        .data()
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(rstd.iter())
                    {
                        let dh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            dx.push(r * (dh[j] - mean_dh - hrow[j] * mean_dh_h));
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), &norm) in g
                    .data()
                    .chunks_exact(n)
                    .zip(y.chunks_exact(n))
                    .zip(norms.iter())
                {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| (gv - yv * dot) / norm));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for row in g.data().chunks_exact(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![m, w], dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let w = g.cols();
                let mut dx = vec![T::zero(); m * n];
                for (drow, grow) in dx.chunks_exact_mut(n).zip(g.data().chunks_exact(w)) {
                    drow[*start..*start + w].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::EmbeddingMean { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let dim = shape[1];
                let mut dt = Tensor::zeros(&shape);
                let dtd = dt.data_mut();
                for (seq, grow) in ids.iter().zip(g.data().chunks_exact(dim)) {
                    let inv = T::one() / T::from_f64(seq.len() as f64);
                    for &id in seq {
                        for (d, &gv) in dtd[id * dim..(id + 1) * dim].iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let c = shape[1];
                let scale = g.item() / T::from_f64(targets.len() as f64);
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_exact_mut(c).zip(targets) {
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dl).unwrap());
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = g.item() * T::from_f64(2.0 / p.len() as f64);
                let data = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| (a - b) * scale)
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), data).unwrap());
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64, 1.0], 2),
            Err(AutodiffError::TargetOutOfRange { target: 2, classes: 2 })
        ));
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        assert!(tape.cross_entropy(l, &[3]).is_err());
    }

    #[test]
    fn saturated_and_uniform_cross_entropy() {
        let uniform = softmax_cross_entropy(&[0.3f64; 11], 4).unwrap();
        assert!((uniform - 11f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&[100.0f64, 0.0, 0.0], 0).unwrap() < 1e-8);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let g = tape.constant(t(&[3], &[1.0; 3]));
        let b = tape.constant(t(&[3], &[0.0; 3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_surface() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.slice_cols(a, 2, 5).is_err());
        let table = tape.param(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            tape.embedding_mean(table, vec![vec![7]]),
            Err(AutodiffError::IndexOutOfRange { index: 7, rows: 4 })
        ));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x + x) style fan-out: d/dx mse(x + x, 0) = 8x / n
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2], &[1.0, -2.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.mse(y, &Tensor::zeros(&[1, 2])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, -8.0]);
    }
}
