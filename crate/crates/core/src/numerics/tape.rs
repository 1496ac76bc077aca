//! Reverse-mode automatic differentiation over 2-D row-major tensors.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] replays the
//! nodes in reverse and accumulates exact chain-rule gradients. Nodes that do
//! not depend on any gradient-requiring leaf are marked constant and skipped.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::tensor::{Precision, Tensor};
use crate::error::{GemsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which (query, key) pairs an attention softmax may use.
#[derive(Debug, Clone, Default)]
pub enum AttnMask {
    #[default]
    None,
    /// Valid key columns.
    Keys(Arc<[bool]>),
    /// Valid query rows and valid key columns.
    Both {
        queries: Arc<[bool]>,
        keys: Arc<[bool]>,
    },
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Rows are stacked sequences of length `n`; causal within each sequence.
    BlockCausal(usize),
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Keys(k) => k[j],
            AttnMask::Both { queries, keys } => queries[i] && keys[j],
            AttnMask::Causal => j <= i,
            AttnMask::BlockCausal(n) => j / n == i / n && j <= i,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, a_t: bool, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    Scale { x: Var, c: f64 },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Silu(Var),
    Sigmoid(Var),
    EluPlusOne(Var),
    Softplus(Var),
    Recip(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Kl { p: Var, q: Var, p_prob: Vec<f64>, q_prob: Vec<f64>, row_kl: Vec<f64>, weights: Vec<f64>, keys: Option<Arc<[bool]>> },
    SqDist { a: Var, b: Var },
    SparseAttn { q: Var, k: Var, v: Var, sel: Arc<Vec<usize>>, width: usize, weights: Vec<f64>, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    precision: Precision,
    frozen: Vec<String>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            precision: Precision::F64,
            frozen: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            ..Tape::new()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Parameters whose name starts with any of these prefixes load as constants.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    /// Disables gradient tracking entirely (evaluation mode).
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf, false)
    }

    /// Loads a parameter from the attached store (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let frozen = {
            let name = store.name(id);
            self.frozen.iter().any(|p| name.starts_with(p.as_str()))
        };
        let v = self.push(store.get(id).clone(), Op::Param, !frozen);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every parameter loaded on this tape that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        let (m, k1) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(GemsError::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k1, n, self.value(a).data(), a_t, self.value(b).data(), b_t, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul { a, a_t, b, b_t }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(GemsError::Dimension {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data).expect("same shape"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Sums a list of same-shape tensors left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| GemsError::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        if self.value(row).len() != n {
            return Err(GemsError::Dimension {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddRow { x, row }, ng))
    }

    /// `x[m×n] * col[m×1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        if self.value(col).len() != m {
            return Err(GemsError::Dimension {
                op: "mul_col",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(col).shape().to_vec(),
            });
        }
        let c = self.value(col).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().for_each(|o| *o *= c[i]);
        }
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MulCol { x, col }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data).expect("shape"), Op::Scale { x, c }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng)
    }

    // ---------------------------------------------------------------- structure

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.value(xs[0]).rows();
        if xs.iter().any(|&x| self.value(x).rows() != m) {
            return Err(GemsError::Dimension {
                op: "concat_cols",
                lhs: self.value(xs[0]).shape().to_vec(),
                rhs: xs.iter().map(|&x| self.value(x).rows()).collect(),
            });
        }
        let n: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        if start + len > n {
            return Err(GemsError::Dimension {
                op: "slice_cols",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.value(xs[0]).cols();
        if xs.iter().any(|&x| self.value(x).cols() != n) {
            return Err(GemsError::Dimension {
                op: "concat_rows",
                lhs: self.value(xs[0]).shape().to_vec(),
                rhs: xs.iter().map(|&x| self.value(x).cols()).collect(),
            });
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let m = xs.iter().map(|&x| self.value(x).rows()).sum();
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatRows(xs.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        if start + len > m {
            return Err(GemsError::Dimension {
                op: "slice_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(len, n, out), Op::SliceRows { x, start }, ng))
    }

    /// Rows `idx` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims(self.value(table));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(GemsError::Contract(format!(
                "gather index {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- nonlinearities

    /// Row softmax restricted to the positions `mask` allows.
    pub fn softmax_rows(&mut self, x: Var, mask: &AttnMask) -> Var {
        let (m, n) = dims(self.value(x));
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            kernels::softmax_in_place(&mut out[i * n..(i + 1) * n], |j| mask.allows(i, j));
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(m, n, out), Op::Softmax { x }, ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = dims(self.value(x));
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let lse = kernels::log_sum_exp(row, |_| true);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(m, n, out), Op::LogSoftmax { x }, ng)
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let (m, n) = dims(self.value(x));
        if self.value(gain).len() != n {
            return Err(GemsError::Dimension {
                op: "rms_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.value(gain).data();
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                out[i * n + j] = row[j] * inv * g[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(Tensor::matrix(m, n, out), Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data).expect("shape"), op, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, kernels::silu, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `elu(x) + 1`, a strictly positive feature map.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        self.map(x, kernels::elu_plus_one, Op::EluPlusOne(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / v, Op::Recip(x))
    }

    // ---------------------------------------------------------------- reductions and losses

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = dims(self.value(logits));
        if targets.len() != m {
            return Err(GemsError::Dimension {
                op: "cross_entropy",
                lhs: self.value(logits).shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(GemsError::Data(format!("target code {t} out of range for {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for i in 0..m {
            let row = &mut probs[i * n..(i + 1) * n];
            let lse = kernels::log_sum_exp(row, |_| true);
            loss += lse - row[targets[i]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / m.max(1) as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `Σ_i w_i · KL(softmax(p_i) ‖ softmax(q_i))` over rows, with both
    /// softmaxes restricted to the valid key columns.
    pub fn kl_rows(
        &mut self,
        p: Var,
        q: Var,
        weights: &[f64],
        keys: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        self.same_shape("kl_rows", p, q)?;
        let (m, n) = dims(self.value(p));
        if weights.len() != m {
            return Err(GemsError::Dimension {
                op: "kl_rows",
                lhs: vec![m, n],
                rhs: vec![weights.len()],
            });
        }
        let allowed = |j: usize| keys.as_ref().is_none_or(|k| k[j]);
        let mut p_prob = self.value(p).data().to_vec();
        let mut q_prob = self.value(q).data().to_vec();
        let mut row_kl = vec![0.0; m];
        let mut total = 0.0;
        for i in 0..m {
            let pr = &self.value(p).data()[i * n..(i + 1) * n];
            let qr = &self.value(q).data()[i * n..(i + 1) * n];
            let lp = kernels::log_sum_exp(pr, allowed);
            let lq = kernels::log_sum_exp(qr, allowed);
            let mut kl = 0.0;
            for j in 0..n {
                if allowed(j) {
                    let lpj = pr[j] - lp;
                    let lqj = qr[j] - lq;
                    let pj = lpj.exp();
                    kl += pj * (lpj - lqj);
                    p_prob[i * n + j] = pj;
                    q_prob[i * n + j] = lqj.exp();
                } else {
                    p_prob[i * n + j] = 0.0;
                    q_prob[i * n + j] = 0.0;
                }
            }
            if lp == f64::NEG_INFINITY {
                kl = 0.0;
            }
            row_kl[i] = kl;
            total += weights[i] * kl;
        }
        let ng = self.ng(p) || self.ng(q);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Kl {
                p,
                q,
                p_prob,
                q_prob,
                row_kl,
                weights: weights.to_vec(),
                keys,
            },
            ng,
        ))
    }

    /// `Σ (a - b)²` over all entries.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_dist", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::SqDist { a, b }, ng))
    }

    /// Attention of every query row over its own selected key rows.
    ///
    /// `sel` holds `width` key indices per query (row-major); `usize::MAX`
    /// marks an unused slot. Returns the mixed values; the softmax weights
    /// stay readable through [`Tape::sparse_weights`].
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        sel: Arc<Vec<usize>>,
        width: usize,
        scale: f64,
    ) -> Result<Var> {
        let (nq, d) = dims(self.value(q));
        let (nk, dk) = dims(self.value(k));
        let (nv, dv) = dims(self.value(v));
        if dk != d || nv != nk || sel.len() != nq * width {
            return Err(GemsError::Dimension {
                op: "sparse_attention",
                lhs: self.value(q).shape().to_vec(),
                rhs: self.value(k).shape().to_vec(),
            });
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; nq * width];
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            let qi = &qd[i * d..(i + 1) * d];
            let w = &mut weights[i * width..(i + 1) * width];
            let s = &sel[i * width..(i + 1) * width];
            for (slot, &j) in s.iter().enumerate() {
                if j != usize::MAX {
                    let kj = &kd[j * d..(j + 1) * d];
                    w[slot] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
            }
            kernels::softmax_in_place(w, |slot| s[slot] != usize::MAX);
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (slot, &j) in s.iter().enumerate() {
                if j != usize::MAX {
                    let vj = &vd[j * dv..(j + 1) * dv];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += w[slot] * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::matrix(nq, dv, out),
            Op::SparseAttn {
                q,
                k,
                v,
                sel,
                width,
                weights,
                scale,
            },
            ng,
        ))
    }

    pub fn sparse_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SparseAttn { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of every reachable gradient-requiring node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(GemsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let ng = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, a_t, b, b_t } => {
                let (ar, ac) = dims(val(a));
                let (br, bc) = dims(val(b));
                let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
                let n = if b_t { br } else { bc };
                if ng(a) {
                    let ga = acc(&mut grads[a.0], ar * ac);
                    if a_t {
                        // a stored k×m: dA = op(B)·Gᵀ
                        gemm(k, n, m, val(b).data(), b_t, g, true, 1.0, ga);
                    } else {
                        // dA = G·op(B)ᵀ
                        gemm(m, n, k, g, false, val(b).data(), !b_t, 1.0, ga);
                    }
                }
                if ng(b) {
                    let gb = acc(&mut grads[b.0], br * bc);
                    if b_t {
                        // b stored n×k: dB = Gᵀ·op(A)
                        gemm(n, m, k, g, true, val(a).data(), a_t, 1.0, gb);
                    } else {
                        // dB = op(A)ᵀ·G
                        gemm(k, m, n, val(a).data(), !a_t, g, false, 1.0, gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for (v, s) in [(a, 1.0), (b, 1.0)] {
                    if ng(v) {
                        let gv = acc(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, s) in [(a, 1.0), (b, -1.0)] {
                    if ng(v) {
                        let gv = acc(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if ng(a) {
                    let bd = val(b).data();
                    let ga = acc(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if ng(b) {
                    let ad = val(a).data();
                    let gb = acc(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            &Op::AddRow { x, row } => {
                let (m, n) = dims(val(x));
                if ng(x) {
                    let gx = acc(&mut grads[x.0], m * n);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if ng(row) {
                    let gr = acc(&mut grads[row.0], n);
                    for r in 0..m {
                        for j in 0..n {
                            gr[j] += g[r * n + j];
                        }
                    }
                }
            }
            &Op::MulCol { x, col } => {
                let (m, n) = dims(val(x));
                if ng(x) {
                    let c = val(col).data();
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        for j in 0..n {
                            gx[r * n + j] += g[r * n + j] * c[r];
                        }
                    }
                }
                if ng(col) {
                    let xd = val(x).data();
                    let gc = acc(&mut grads[col.0], m);
                    for r in 0..m {
                        gc[r] += (0..n).map(|j| g[r * n + j] * xd[r * n + j]).sum::<f64>();
                    }
                }
            }
            &Op::Scale { x, c } => {
                if ng(x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            &Op::Transpose(x) => {
                if ng(x) {
                    let (m, n) = dims(val(x));
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        for j in 0..n {
                            gx[r * n + j] += g[j * m + r];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut off = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if ng(x) {
                        let gx = acc(&mut grads[x.0], m * w);
                        for r in 0..m {
                            for j in 0..w {
                                gx[r * w + j] += g[r * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if ng(x) {
                    let (m, n) = dims(val(x));
                    let w = node.value.cols();
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        for j in 0..w {
                            gx[r * n + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    if ng(x) {
                        let gx = acc(&mut grads[x.0], len);
                        gx.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                if ng(x) {
                    let n = val(x).cols();
                    let total = val(x).len();
                    let gx = acc(&mut grads[x.0], total);
                    gx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather { table, idx } => {
                let table = *table;
                if ng(table) {
                    let n = val(table).cols();
                    let total = val(table).len();
                    let gt = acc(&mut grads[table.0], total);
                    for (r, &row) in idx.iter().enumerate() {
                        for j in 0..n {
                            gt[row * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if ng(x) {
                    let (m, n) = dims(&node.value);
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x } => {
                if ng(x) {
                    let (m, n) = dims(&node.value);
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        let gsum: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for j in 0..n {
                            gx[r * n + j] += g[r * n + j] - y[r * n + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let (m, n) = dims(val(x));
                let xd = val(x).data();
                let gd = val(gain).data();
                if ng(x) {
                    let gx = acc(&mut grads[x.0], m * n);
                    for r in 0..m {
                        let inv = inv_rms[r];
                        let row = &xd[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        // y_j = x_j·inv·w_j ; inv = (mean(x²)+eps)^(-1/2)
                        let dot: f64 = (0..n).map(|j| gr[j] * gd[j] * row[j]).sum();
                        let coef = dot * inv * inv * inv / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += gr[j] * gd[j] * inv - row[j] * coef;
                        }
                    }
                }
                if ng(gain) {
                    let gg = acc(&mut grads[gain.0], n);
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xd[r * n + j] * inv_rms[r];
                        }
                    }
                }
            }
            &Op::Silu(x) => {
                if ng(x) {
                    let xd = val(x).data();
                    let gx = acc(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        let s = kernels::sigmoid(xd[j]);
                        gx[j] += g[j] * s * (1.0 + xd[j] * (1.0 - s));
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if ng(x) {
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            &Op::EluPlusOne(x) => {
                if ng(x) {
                    let xd = val(x).data();
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * if xd[j] > 0.0 { 1.0 } else { y[j] };
                    }
                }
            }
            &Op::Softplus(x) => {
                if ng(x) {
                    let xd = val(x).data();
                    let gx = acc(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * kernels::sigmoid(xd[j]);
                    }
                }
            }
            &Op::Recip(x) => {
                if ng(x) {
                    let y = node.value.data();
                    let gx = acc(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        gx[j] -= g[j] * y[j] * y[j];
                    }
                }
            }
            &Op::SumAll(x) => {
                if ng(x) {
                    let len = val(x).len();
                    let gx = acc(&mut grads[x.0], len);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if ng(logits) {
                    let (m, n) = dims(val(logits));
                    let s = g[0] / m.max(1) as f64;
                    let gl = acc(&mut grads[logits.0], m * n);
                    for r in 0..m {
                        for j in 0..n {
                            let onehot = if targets[r] == j { 1.0 } else { 0.0 };
                            gl[r * n + j] += s * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
            Op::Kl {
                p,
                q,
                p_prob,
                q_prob,
                row_kl,
                weights,
                keys,
            } => {
                let (p, q) = (*p, *q);
                let (m, n) = dims(val(p));
                let allowed = |j: usize| keys.as_ref().is_none_or(|k| k[j]);
                if ng(q) {
                    let gq = acc(&mut grads[q.0], m * n);
                    for r in 0..m {
                        let s = g[0] * weights[r];
                        for j in 0..n {
                            if allowed(j) {
                                gq[r * n + j] += s * (q_prob[r * n + j] - p_prob[r * n + j]);
                            }
                        }
                    }
                }
                if ng(p) {
                    let gp = acc(&mut grads[p.0], m * n);
                    for r in 0..m {
                        let s = g[0] * weights[r];
                        for j in 0..n {
                            let pj = p_prob[r * n + j];
                            if allowed(j) && pj > 0.0 {
                                let qj = q_prob[r * n + j];
                                gp[r * n + j] += s * pj * (pj.ln() - qj.ln() - row_kl[r]);
                            }
                        }
                    }
                }
            }
            &Op::SqDist { a, b } => {
                let ad = val(a).data();
                let bd = val(b).data();
                for (v, sign) in [(a, 2.0), (b, -2.0)] {
                    if ng(v) {
                        let gv = acc(&mut grads[v.0], ad.len());
                        for j in 0..ad.len() {
                            gv[j] += g[0] * sign * (ad[j] - bd[j]);
                        }
                    }
                }
            }
            Op::SparseAttn {
                q,
                k,
                v,
                sel,
                width,
                weights,
                scale,
            } => {
                let (q, k, v, width, scale) = (*q, *k, *v, *width, *scale);
                let (nq, d) = dims(val(q));
                let (nk, dv) = dims(val(v));
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * dv];
                let mut dw = vec![0.0; width];
                for i in 0..nq {
                    let s = &sel[i * width..(i + 1) * width];
                    let w = &weights[i * width..(i + 1) * width];
                    let gi = &g[i * dv..(i + 1) * dv];
                    let mut dot = 0.0;
                    for (slot, &j) in s.iter().enumerate() {
                        if j == usize::MAX {
                            dw[slot] = 0.0;
                            continue;
                        }
                        let vj = &vd[j * dv..(j + 1) * dv];
                        dw[slot] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += w[slot] * dw[slot];
                        for (acc_v, &gg) in gv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                            *acc_v += w[slot] * gg;
                        }
                    }
                    let qi = &qd[i * d..(i + 1) * d];
                    for (slot, &j) in s.iter().enumerate() {
                        if j == usize::MAX {
                            continue;
                        }
                        let ds = w[slot] * (dw[slot] - dot) * scale;
                        let kj = &kd[j * d..(j + 1) * d];
                        for c in 0..d {
                            gq[i * d + c] += ds * kj[c];
                            gk[j * d + c] += ds * qi[c];
                        }
                    }
                }
                for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                    if ng(var) {
                        let slot = acc(&mut grads[var.0], buf.len());
                        slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}
