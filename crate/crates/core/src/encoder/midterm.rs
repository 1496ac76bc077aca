//! Mid-term stream: pre-norm attention blocks, each shadowed by a small
//! indexer whose head-mixed scores pick the keys for sparse attention.
//!
//! The indexer reads a detached copy of the block input, so neither its
//! forward values nor its loss ever reach the main parameters.

use std::sync::Arc;

use super::left_pad_mask;
use crate::error::{GemsError, Result};
use crate::nn::{add_into, cols, Ffn, Linear, Mha, RmsNorm};
use crate::numerics::{kernels, AttnMask, ParamId, ParamStore, Tape, Tensor, Var};

/// Head-mixing nonlinearity applied to `X W_D + b_D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMix {
    Softplus,
    /// Raw linear mix; used to reproduce the main scores exactly in tests.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidConfig {
    /// Maximum stream length (`L - R`).
    pub budget: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub idx_heads: usize,
    pub idx_dim: usize,
    pub head_mix: HeadMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MidPath {
    Dense,
    /// Top-`k` keys per query by indexer score.
    Sparse(usize),
}

#[derive(Debug, Clone)]
pub struct Indexer {
    pub wq: Linear,
    pub wk: Linear,
    pub wd: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct MidBlock {
    pub norm1: RmsNorm,
    pub attn: Mha,
    pub norm2: RmsNorm,
    pub ffn: Ffn,
    pub indexer: Option<Indexer>,
}

#[derive(Debug, Clone)]
pub struct MidEncoder {
    pub cfg: MidConfig,
    pub pos: ParamId,
    pub blocks: Vec<MidBlock>,
    pub norm: RmsNorm,
}

/// Per-block score matrices are present only when the indexer ran.
pub struct MidOutput {
    pub out: Var,
    /// Detached head-sum of the main scores.
    pub s_mid: Vec<Var>,
    pub s_idx: Vec<Var>,
    /// Selected keys per block (row-major, `width` per query) on the sparse path.
    pub selections: Vec<Arc<Vec<usize>>>,
    pub width: usize,
}

/// `softplus(b) = 1`, so every head starts with unit weight.
const SOFTPLUS_ONE: f64 = 0.541_324_854_612_918_1;

impl MidEncoder {
    pub fn new(store: &mut ParamStore, cfg: MidConfig, with_indexer: bool) -> Self {
        let d = cfg.d_h;
        let blocks = (0..cfg.layers)
            .map(|j| {
                let name = format!("mid.block{j}");
                let indexer = with_indexer.then(|| {
                    let iname = format!("mid.indexer.block{j}");
                    let inner = cfg.idx_heads * cfg.idx_dim;
                    let wd = Linear {
                        w: store.normal(&format!("{iname}.wd.w"), d, cfg.idx_heads, 0.01),
                        b: Some(store.constant(
                            &format!("{iname}.wd.b"),
                            &[1, cfg.idx_heads],
                            match cfg.head_mix {
                                HeadMix::Softplus => SOFTPLUS_ONE,
                                HeadMix::Identity => 1.0,
                            },
                        )),
                    };
                    Indexer {
                        wq: Linear::new(store, &format!("{iname}.wq"), d, inner, false),
                        wk: Linear::new(store, &format!("{iname}.wk"), d, inner, false),
                        wd,
                        heads: cfg.idx_heads,
                        dim: cfg.idx_dim,
                    }
                });
                MidBlock {
                    norm1: RmsNorm::new(store, &format!("{name}.norm1"), d),
                    attn: Mha::new(store, &format!("{name}.attn"), d, cfg.heads),
                    norm2: RmsNorm::new(store, &format!("{name}.norm2"), d),
                    ffn: Ffn::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden),
                    indexer,
                }
            })
            .collect();
        MidEncoder {
            pos: store.normal("mid.pos", cfg.budget, d, 0.02),
            norm: RmsNorm::new(store, "mid.norm", d),
            blocks,
            cfg,
        }
    }

    pub fn has_indexer(&self) -> bool {
        self.blocks.iter().all(|b| b.indexer.is_some()) && !self.blocks.is_empty()
    }

    fn check_path(&self, path: MidPath) -> Result<()> {
        if let MidPath::Sparse(k) = path {
            if k == 0 {
                return Err(GemsError::config("model.top_k", "must be at least 1"));
            }
            if !self.has_indexer() {
                return Err(GemsError::Contract("sparse attention needs the indexer".into()));
            }
        }
        Ok(())
    }

    /// `h` holds the embedded stream, oldest first (`n ≤ budget` rows);
    /// positions are aligned so the newest row always takes the last slot.
    /// `valid` marks real rows (default: all). `scores` requests the score
    /// matrices needed for the indexer loss.
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        h: Var,
        valid: Option<Arc<[bool]>>,
        path: MidPath,
        scores: bool,
    ) -> Result<MidOutput> {
        self.check_path(path)?;
        let n = t.value(h).rows();
        if n == 0 || n > self.cfg.budget {
            return Err(GemsError::Contract(format!(
                "mid-term stream of {n} rows (budget {})",
                self.cfg.budget
            )));
        }
        let valid = valid.unwrap_or_else(|| left_pad_mask(n, n));
        let pos = t.param(self.pos);
        let pos = t.slice_rows(pos, self.cfg.budget - n, n)?;
        let mut x = t.add(h, pos)?;
        let mut out = MidOutput {
            out: x,
            s_mid: Vec::new(),
            s_idx: Vec::new(),
            selections: Vec::new(),
            width: 0,
        };
        let key_mask = AttnMask::Keys(valid.clone());
        for b in &self.blocks {
            let xn = b.norm1.forward(t, x)?;
            let a = &b.attn;
            let q = a.wq.forward(t, xn)?;
            let k = a.wk.forward(t, xn)?;
            let v = a.wv.forward(t, xn)?;
            let scale = 1.0 / (a.head_dim as f64).sqrt();
            let head = |t: &mut Tape<'_>, m: Var, hh: usize| {
                if a.heads == 1 {
                    Ok(m)
                } else {
                    t.slice_cols(m, hh * a.head_dim, a.head_dim)
                }
            };

            let need_idx = scores || matches!(path, MidPath::Sparse(_));
            let s_idx = match (&b.indexer, need_idx) {
                (Some(ix), true) => Some(self.indexer_scores(t, ix, xn)?),
                _ => None,
            };

            let mut head_scores = Vec::new();
            let mut outs = Vec::with_capacity(a.heads);
            match path {
                MidPath::Dense => {
                    for hh in 0..a.heads {
                        let (qh, kh, vh) = (head(t, q, hh)?, head(t, k, hh)?, head(t, v, hh)?);
                        let s = t.matmul_t(qh, false, kh, true)?;
                        let s = t.scale(s, scale);
                        head_scores.push(s);
                        let p = t.softmax_rows(s, &key_mask);
                        outs.push(t.matmul(p, vh)?);
                    }
                }
                MidPath::Sparse(kk) => {
                    let s_val = t.value(s_idx.expect("indexer scores")).clone();
                    let width = kk.min(n);
                    let sel = Arc::new(select_rows(&s_val, width, &valid));
                    for hh in 0..a.heads {
                        let (qh, kh, vh) = (head(t, q, hh)?, head(t, k, hh)?, head(t, v, hh)?);
                        if scores {
                            let s = t.matmul_t(qh, false, kh, true)?;
                            head_scores.push(t.scale(s, scale));
                        }
                        outs.push(t.sparse_attention(qh, kh, vh, sel.clone(), width, scale)?);
                    }
                    out.selections.push(sel);
                    out.width = width;
                }
            }
            if scores {
                if let Some(si) = s_idx {
                    let sum = t.add_all(&head_scores)?;
                    out.s_mid.push(t.detach(sum));
                    out.s_idx.push(si);
                }
            }
            let o = if a.heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
            let o = a.wo.forward(t, o)?;
            let x1 = t.add(x, o)?;
            let f = b.norm2.forward(t, x1)?;
            let f = b.ffn.forward(t, f)?;
            x = t.add(x1, f)?;
        }
        out.out = self.norm.forward(t, x)?;
        Ok(out)
    }

    fn indexer_scores(&self, t: &mut Tape<'_>, ix: &Indexer, xn: Var) -> Result<Var> {
        let xd = t.detach(xn);
        let q = ix.wq.forward(t, xd)?;
        let k = ix.wk.forward(t, xd)?;
        let dlin = ix.wd.forward(t, xd)?;
        let dmix = match self.cfg.head_mix {
            HeadMix::Softplus => t.softplus(dlin),
            HeadMix::Identity => dlin,
        };
        let scale = 1.0 / (ix.dim as f64).sqrt();
        let mut parts = Vec::with_capacity(ix.heads);
        for h in 0..ix.heads {
            let (qh, kh, dh) = if ix.heads == 1 {
                (q, k, dmix)
            } else {
                (
                    t.slice_cols(q, h * ix.dim, ix.dim)?,
                    t.slice_cols(k, h * ix.dim, ix.dim)?,
                    t.slice_cols(dmix, h, 1)?,
                )
            };
            let s = t.matmul_t(qh, false, kh, true)?;
            let s = t.scale(s, scale);
            parts.push(t.mul_col(s, dh)?);
        }
        t.add_all(&parts)
    }

    /// Tape-free forward used for benchmarking long streams: rows are
    /// processed in chunks so no `n × n` matrix is ever held.
    pub fn infer(&self, store: &ParamStore, h: &Tensor, path: MidPath) -> Result<Tensor> {
        self.check_path(path)?;
        let n = h.rows();
        if n == 0 || n > self.cfg.budget {
            return Err(GemsError::Contract(format!("mid-term stream of {n} rows")));
        }
        let pos = store.get(self.pos);
        let mut x = h.clone();
        for (i, row) in x.data_mut().chunks_mut(self.cfg.d_h).enumerate() {
            row.iter_mut()
                .zip(pos.row(self.cfg.budget - n + i))
                .for_each(|(a, b)| *a += b);
        }
        for b in &self.blocks {
            let xn = b.norm1.apply(store, &x);
            let a = &b.attn;
            let q = a.wq.apply(store, &xn);
            let k = a.wk.apply(store, &xn);
            let v = a.wv.apply(store, &xn);
            let split = |m: &Tensor| -> Vec<Tensor> { (0..a.heads).map(|hh| cols(m, hh * a.head_dim, a.head_dim)).collect() };
            let scale = 1.0 / (a.head_dim as f64).sqrt();
            let mut o = vec![0.0; n * a.heads * a.head_dim];
            match path {
                MidPath::Dense => dense_rows(&split(&q), &split(&k), &split(&v), scale, &mut o),
                MidPath::Sparse(kk) => {
                    let ix = b.indexer.as_ref().expect("checked");
                    let iq = ix.wq.apply(store, &xn);
                    let ik = ix.wk.apply(store, &xn);
                    let mut dm = ix.wd.apply(store, &xn);
                    if self.cfg.head_mix == HeadMix::Softplus {
                        dm.data_mut().iter_mut().for_each(|x| *x = kernels::softplus(*x));
                    }
                    let iqs: Vec<Tensor> = (0..ix.heads).map(|hh| cols(&iq, hh * ix.dim, ix.dim)).collect();
                    let iks: Vec<Tensor> = (0..ix.heads).map(|hh| cols(&ik, hh * ix.dim, ix.dim)).collect();
                    let iscale = 1.0 / (ix.dim as f64).sqrt();
                    sparse_rows((&q, &k, &v, a.heads), scale, (&iqs, &iks, &dm, iscale), kk.min(n), &mut o);
                }
            }
            let o = Tensor::new(vec![n, a.heads * a.head_dim], o)?;
            let o = a.wo.apply(store, &o);
            add_into(&mut x, &o);
            let f = b.ffn.apply(store, &b.norm2.apply(store, &x));
            add_into(&mut x, &f);
        }
        Ok(self.norm.apply(store, &x))
    }
}

/// Top-`width` keys of every row of `s`, padded with `usize::MAX`.
pub fn select_rows(s: &Tensor, width: usize, valid: &[bool]) -> Vec<usize> {
    let mut sel = Vec::with_capacity(s.rows() * width);
    for i in 0..s.rows() {
        let top = kernels::top_k_indices(s.row(i), width, Some(valid));
        sel.extend_from_slice(&top);
        sel.extend(std::iter::repeat_n(usize::MAX, width - top.len()));
    }
    sel
}

/// Summed-KL distillation loss: each block contributes the mean over valid
/// queries of `KL(softmax(S_mid) ‖ softmax(S_idx))` over valid keys.
pub fn indexer_loss(t: &mut Tape<'_>, s_mid: &[Var], s_idx: &[Var], valid: Option<Arc<[bool]>>) -> Result<Var> {
    if s_mid.len() != s_idx.len() || s_mid.is_empty() {
        return Err(GemsError::Contract("indexer loss needs matching, non-empty score lists".into()));
    }
    let n = t.value(s_mid[0]).rows();
    let valid = valid.unwrap_or_else(|| left_pad_mask(n, n));
    let nv = valid.iter().filter(|v| **v).count().max(1) as f64;
    let w: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / nv } else { 0.0 }).collect();
    let mut parts = Vec::with_capacity(s_mid.len());
    for (&p, &q) in s_mid.iter().zip(s_idx) {
        let p = t.detach(p);
        parts.push(t.kl_rows(p, q, &w, Some(valid.clone()))?);
    }
    t.add_all(&parts)
}

/// Mean fraction of each row's top-`k` by `s_idx` that is also in its
/// top-`k` by `s_mid`.
pub fn topk_overlap(s_mid: &Tensor, s_idx: &Tensor, k: usize) -> f64 {
    let n = s_mid.rows();
    let k = k.min(s_mid.cols());
    if n == 0 || k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = kernels::top_k_indices(s_mid.row(i), k, None);
        let b = kernels::top_k_indices(s_idx.row(i), k, None);
        total += b.iter().filter(|j| a.contains(j)).count() as f64 / k as f64;
    }
    total / n as f64
}

const CHUNK: usize = 64;

fn dense_rows(qs: &[Tensor], ks: &[Tensor], vs: &[Tensor], scale: f64, out: &mut [f64]) {
    let n = ks[0].rows();
    let hd = ks[0].cols();
    let width = qs.len() * hd;
    let mut s = vec![0.0; CHUNK * n];
    let mut o = vec![0.0; CHUNK * hd];
    for start in (0..n).step_by(CHUNK) {
        let c = CHUNK.min(n - start);
        for (h, ((q, k), v)) in qs.iter().zip(ks).zip(vs).enumerate() {
            let s = &mut s[..c * n];
            kernels::gemm(c, hd, n, &q.data()[start * hd..(start + c) * hd], false, k.data(), true, 0.0, s);
            for row in s.chunks_mut(n) {
                row.iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_in_place(row, |_| true);
            }
            let o = &mut o[..c * hd];
            kernels::gemm(c, n, hd, s, false, v.data(), false, 0.0, o);
            for r in 0..c {
                out[(start + r) * width + h * hd..(start + r) * width + (h + 1) * hd]
                    .copy_from_slice(&o[r * hd..(r + 1) * hd]);
            }
        }
    }
}

/// Indexer-selected attention over unsplit `n × heads·hd` projections; each
/// selected key row is read once for all heads.
fn sparse_rows(
    (q, k, v, heads): (&Tensor, &Tensor, &Tensor, usize),
    scale: f64,
    (iqs, iks, dm, iscale): (&[Tensor], &[Tensor], &Tensor, f64),
    width: usize,
    out: &mut [f64],
) {
    let n = k.rows();
    let hd = k.cols() / heads;
    let di = iks[0].cols();
    let mut acc = vec![0.0; CHUNK * n];
    let mut tmp = vec![0.0; CHUNK * n];
    let mut w = vec![0.0; heads * width];
    for start in (0..n).step_by(CHUNK) {
        let c = CHUNK.min(n - start);
        let acc = &mut acc[..c * n];
        acc.fill(0.0);
        for (h, (iq, ik)) in iqs.iter().zip(iks).enumerate() {
            let tmp = &mut tmp[..c * n];
            kernels::gemm(c, di, n, &iq.data()[start * di..(start + c) * di], false, ik.data(), true, 0.0, tmp);
            for r in 0..c {
                let d = dm.at(start + r, h) * iscale;
                let (a, s) = (&mut acc[r * n..(r + 1) * n], &tmp[r * n..(r + 1) * n]);
                a.iter_mut().zip(s).for_each(|(a, s)| *a += s * d);
            }
        }
        for r in 0..c {
            let i = start + r;
            let sel = kernels::top_k_indices(&acc[r * n..(r + 1) * n], width, None);
            let m = sel.len();
            let qi = q.row(i);
            for (slot, &j) in sel.iter().enumerate() {
                let kj = k.row(j);
                for h in 0..heads {
                    let span = h * hd..(h + 1) * hd;
                    w[h * width + slot] = kernels::dot(&qi[span.clone()], &kj[span]) * scale;
                }
            }
            for h in 0..heads {
                kernels::softmax_in_place(&mut w[h * width..h * width + m], |_| true);
            }
            let o = &mut out[i * heads * hd..(i + 1) * heads * hd];
            for (slot, &j) in sel.iter().enumerate() {
                let vj = v.row(j);
                for h in 0..heads {
                    let p = w[h * width + slot];
                    o[h * hd..(h + 1) * hd]
                        .iter_mut()
                        .zip(&vj[h * hd..(h + 1) * hd])
                        .for_each(|(o, x)| *o += p * x);
                }
            }
        }
    }
}

/// Attention FLOPs of one block (a multiply-add counts as 2): score
/// evaluation plus value mixing in the main heads, plus indexer scoring on
/// the sparse path. Projections and FFN cost the same on both paths and are
/// left out.
pub fn attention_flops(cfg: &MidConfig, n: usize, path: MidPath) -> f64 {
    let (n, d) = (n as f64, cfg.d_h as f64);
    match path {
        MidPath::Dense => 4.0 * n * n * d,
        MidPath::Sparse(k) => {
            let k = (k as f64).min(n);
            4.0 * n * k * d + 2.0 * n * n * (cfg.idx_heads * cfg.idx_dim) as f64
        }
    }
}
