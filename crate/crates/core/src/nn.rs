//! Parameterised layers shared by the encoders and the decoder.

use crate::error::Result;
use crate::numerics::{kernels, AttnMask, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            w: store.linear(&format!("{name}.w"), fan_in, fan_out),
            b: bias.then(|| store.constant(&format!("{name}.b"), &[1, fan_out], 0.0)),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.constant(&format!("{name}.w"), &[fan_in, fan_out], 0.0),
            b: Some(store.constant(&format!("{name}.b"), &[1, fan_out], 0.0)),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Tape-free forward for inference paths.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let w = store.get(self.w);
        let (m, k, n) = (x.rows(), w.rows(), w.cols());
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, x.data(), false, w.data(), false, 0.0, &mut out);
        if let Some(b) = self.b {
            let b = store.get(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b).for_each(|(o, x)| *o += x);
            }
        }
        Tensor::new(vec![m, n], out).expect("shape")
    }
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        RmsNorm {
            gain: store.constant(&format!("{name}.g"), &[1, d], 1.0),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = t.param(self.gain);
        t.rms_norm(x, g)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let g = store.get(self.gain).data();
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / n as f64 + 1e-6).sqrt();
            row.iter_mut().zip(g).for_each(|(v, g)| *v = *v * inv * g);
        }
        out
    }
}

/// SiLU-gated feed-forward: `(silu(x W1) ⊙ x W3) W2`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub w1: Linear,
    pub w3: Linear,
    pub w2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize) -> Self {
        Ffn {
            w1: Linear::new(store, &format!("{name}.w1"), d, hidden, false),
            w3: Linear::new(store, &format!("{name}.w3"), d, hidden, false),
            w2: Linear::new(store, &format!("{name}.w2"), hidden, d, false),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let a = self.w1.forward(t, x)?;
        let a = t.silu(a);
        let b = self.w3.forward(t, x)?;
        let h = t.mul(a, b)?;
        self.w2.forward(t, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut a = self.w1.apply(store, x);
        let b = self.w3.apply(store, x);
        a.data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(a, b)| *a = kernels::silu(*a) * b);
        self.w2.apply(store, &a)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

/// Attention output plus the per-head probability matrices.
pub struct AttnOut {
    pub out: Var,
    pub probs: Vec<Var>,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Self {
        let head_dim = d / heads;
        let inner = head_dim * heads;
        Mha {
            wq: Linear::new(store, &format!("{name}.wq"), d, inner, false),
            wk: Linear::new(store, &format!("{name}.wk"), d, inner, false),
            wv: Linear::new(store, &format!("{name}.wv"), d, inner, false),
            wo: Linear::new(store, &format!("{name}.wo"), inner, d, false),
            heads,
            head_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, xq: Var, xkv: Var, mask: &AttnMask) -> Result<AttnOut> {
        let q = self.wq.forward(t, xq)?;
        let k = self.wk.forward(t, xkv)?;
        let v = self.wv.forward(t, xkv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let off = h * self.head_dim;
                (
                    t.slice_cols(q, off, self.head_dim)?,
                    t.slice_cols(k, off, self.head_dim)?,
                    t.slice_cols(v, off, self.head_dim)?,
                )
            };
            let s = t.matmul_t(qh, false, kh, true)?;
            let s = t.scale(s, scale);
            let p = t.softmax_rows(s, mask);
            outs.push(t.matmul(p, vh)?);
            probs.push(p);
        }
        let o = if self.heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
        Ok(AttnOut {
            out: self.wo.forward(t, o)?,
            probs,
        })
    }
}

/// Pre-norm self-attention block: `x + Attn(RMSN(x))`, then `+ FFN(RMSN(·))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: RmsNorm,
    pub attn: Mha,
    pub norm2: RmsNorm,
    pub ffn: Ffn,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_hidden: usize) -> Self {
        EncoderBlock {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), d),
            attn: Mha::new(store, &format!("{name}.attn"), d, heads),
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), d),
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, ffn_hidden),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, mask: &AttnMask) -> Result<Var> {
        let n = self.norm1.forward(t, x)?;
        let a = self.attn.forward(t, n, n, mask)?.out;
        let x = t.add(x, a)?;
        let n = self.norm2.forward(t, x)?;
        let f = self.ffn.forward(t, n)?;
        t.add(x, f)
    }
}

/// `a + b` for equal-shaped tensors.
pub fn add_into(a: &mut Tensor, b: &Tensor) {
    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
}

/// Contiguous copy of columns `start..start + len`.
pub fn cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let data = (0..x.rows()).flat_map(|i| x.row(i)[start..start + len].iter().copied()).collect();
    Tensor::new(vec![x.rows(), len], data).expect("shape")
}

/// Zero tensor of shape `rows × cols` on the tape.
pub fn zeros(t: &mut Tape<'_>, rows: usize, cols: usize) -> Var {
    t.constant(Tensor::zeros(&[rows, cols]))
}
