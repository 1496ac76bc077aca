//! Semantic-ID decoder: causal self-attention over `[BOS; E_1[s_1]; ...]`,
//! per-stream cross-attention branches, and the four fusion modes.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{GemsError, Result};
use crate::nn::{Ffn, Linear, Mha, RmsNorm};
use crate::numerics::{AttnMask, ParamId, ParamStore, Tape, Var};

/// How the three stream memories reach the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    /// One shared encoder over the concatenated token streams.
    A,
    /// One cross-attention over the concatenated per-stream memories.
    B,
    /// Per-stream branches mixed by learned per-token gates.
    C,
    /// Per-stream branches summed, no fusion parameters.
    D,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::A, Fusion::B, Fusion::C, Fusion::D];

    pub fn per_stream(self) -> bool {
        matches!(self, Fusion::C | Fusion::D)
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::A => "a",
            Fusion::B => "b",
            Fusion::C => "c",
            Fusion::D => "d",
        })
    }
}

impl FromStr for Fusion {
    type Err = GemsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Fusion::A),
            "b" => Ok(Fusion::B),
            "c" => Ok(Fusion::C),
            "d" => Ok(Fusion::D),
            other => Err(GemsError::config("model.fusion", format!("unknown fusion mode `{other}` (expected a, b, c or d)"))),
        }
    }
}

pub const STREAMS: [&str; 3] = ["recent", "mid", "lifecycle"];

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub sizes: Vec<usize>,
    pub fusion: Fusion,
    /// Score logits against the input code tables.
    pub tied: bool,
}

/// One encoded memory and its valid key rows.
#[derive(Debug, Clone)]
pub struct StreamMemory {
    pub value: Var,
    pub keys: Option<Arc<[bool]>>,
}

impl StreamMemory {
    pub fn new(value: Var) -> Self {
        StreamMemory { value, keys: None }
    }

    fn mask(&self) -> AttnMask {
        self.keys.clone().map_or(AttnMask::None, AttnMask::Keys)
    }
}

#[derive(Debug, Clone)]
pub enum DecoderMemory {
    /// Recent, mid, lifecycle; `None` for an empty or disabled stream.
    PerStream([Option<StreamMemory>; 3]),
    /// A single memory whose rows `ranges[s] = (start, len)` came from stream `s`.
    Shared {
        memory: StreamMemory,
        ranges: [(usize, usize); 3],
    },
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub norm_ca: RmsNorm,
    pub ca: Mha,
    pub norm_ffn: RmsNorm,
    pub ffn: Ffn,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, c: &DecoderConfig) -> Self {
        Branch {
            norm_ca: RmsNorm::new(store, &format!("{name}.norm_ca"), c.d_h),
            ca: Mha::new(store, &format!("{name}.ca"), c.d_h, c.heads),
            norm_ffn: RmsNorm::new(store, &format!("{name}.norm_ffn"), c.d_h),
            ffn: Ffn::new(store, &format!("{name}.ffn"), c.d_h, c.ffn_hidden),
        }
    }

    /// `D = x' + CA(RMSN(x'), m)`, `D* = D + FFN(RMSN(D))`; per-head
    /// attention probabilities are returned for the mass report.
    pub fn forward(&self, t: &mut Tape<'_>, x: Var, m: &StreamMemory) -> Result<(Var, Vec<Var>)> {
        let n = self.norm_ca.forward(t, x)?;
        let a = self.ca.forward(t, n, m.value, &m.mask())?;
        let d = t.add(x, a.out)?;
        let n = self.norm_ffn.forward(t, d)?;
        let f = self.ffn.forward(t, n)?;
        Ok((t.add(d, f)?, a.probs))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm_sa: RmsNorm,
    pub sa: Mha,
    /// Three branches (recent, mid, lifecycle) in modes c/d, one otherwise.
    pub branches: Vec<Branch>,
    pub gate_norm: Option<RmsNorm>,
    pub gate: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub bos: ParamId,
    pub pos: ParamId,
    /// Input code tables, one per level (`decoder.code.{l}`).
    pub codes: Vec<ParamId>,
    /// Output tables; equal to `codes` when tied.
    pub out: Vec<ParamId>,
    pub blocks: Vec<DecoderBlock>,
    pub norm: RmsNorm,
}

/// Running sums of per-stream allocation (gates or cross-attention mass).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MassStats {
    pub sum: [f64; 3],
    pub count: usize,
}

impl MassStats {
    pub fn merge(&mut self, o: &MassStats) {
        for s in 0..3 {
            self.sum[s] += o.sum[s];
        }
        self.count += o.count;
    }

    pub fn mean(&self) -> [f64; 3] {
        if self.count == 0 {
            return [1.0 / 3.0; 3];
        }
        self.sum.map(|x| x / self.count as f64)
    }
}

pub struct DecodeOut {
    /// Level `l` logits, one row per input sequence.
    pub logits: Vec<Var>,
    pub mass: MassStats,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig) -> Self {
        let d = cfg.d_h;
        let codes: Vec<ParamId> = cfg
            .sizes
            .iter()
            .enumerate()
            .map(|(l, &m)| store.normal(&format!("decoder.code.{l}"), m, d, 1.0))
            .collect();
        let out = if cfg.tied {
            codes.clone()
        } else {
            cfg.sizes
                .iter()
                .enumerate()
                .map(|(l, &m)| store.normal(&format!("decoder.out.{l}"), m, d, 1.0))
                .collect()
        };
        let blocks = (0..cfg.layers)
            .map(|j| {
                let name = format!("decoder.block{j}");
                let branches = if cfg.fusion.per_stream() {
                    STREAMS
                        .iter()
                        .map(|s| Branch::new(store, &format!("{name}.{s}"), &cfg))
                        .collect()
                } else {
                    vec![Branch::new(store, &format!("{name}.shared"), &cfg)]
                };
                let gated = cfg.fusion == Fusion::C;
                DecoderBlock {
                    norm_sa: RmsNorm::new(store, &format!("{name}.norm_sa"), d),
                    sa: Mha::new(store, &format!("{name}.sa"), d, cfg.heads),
                    branches,
                    gate_norm: gated.then(|| RmsNorm::new(store, &format!("{name}.gate_norm"), d)),
                    gate: gated.then(|| Linear::zeros(store, &format!("{name}.gate"), d, 3)),
                }
            })
            .collect();
        Decoder {
            bos: store.normal("decoder.bos", 1, d, 1.0),
            pos: store.normal("decoder.pos", cfg.sizes.len() + 1, d, 0.02),
            norm: RmsNorm::new(store, "decoder.norm", d),
            codes,
            out,
            blocks,
            cfg,
        }
    }

    pub fn depth(&self) -> usize {
        self.cfg.sizes.len()
    }

    /// Stacked input rows for `prefixes` (all of equal length `k ≤ depth`),
    /// sequence-major: row `p` of a sequence holds BOS (`p = 0`) or the
    /// code of level `p - 1`, plus its position embedding.
    pub fn inputs(&self, t: &mut Tape<'_>, prefixes: &[Vec<usize>]) -> Result<Var> {
        let b = prefixes.len();
        let k = prefixes.first().map_or(0, Vec::len);
        if b == 0 || prefixes.iter().any(|p| p.len() != k) || k > self.depth() {
            return Err(GemsError::Contract("decoder prefixes must be non-empty and of equal length ≤ depth".into()));
        }
        let n = k + 1;
        for p in prefixes {
            for (l, &c) in p.iter().enumerate() {
                if c >= self.cfg.sizes[l] {
                    return Err(GemsError::Data(format!("code {c} out of range for level {l}")));
                }
            }
        }

        let bos = t.param(self.bos);
        let mut rows = Vec::with_capacity(n);
        rows.push(bos);
        for l in 0..k {
            let table = t.param(self.codes[l]);
            let idx: Vec<usize> = prefixes.iter().map(|p| p[l]).collect();
            rows.push(t.gather_rows(table, &idx)?);
        }
        // level-major blocks of b rows; interleave into sequences
        let order: Vec<usize> = (0..b).flat_map(|s| (0..n).map(move |p| p * b + s)).collect();
        let bos_b = if b == 1 { bos } else { t.gather_rows(bos, &vec![0; b])? };
        rows[0] = bos_b;
        let cat = t.concat_rows(&rows)?;
        let x = t.gather_rows(cat, &order)?;
        let pos = t.param(self.pos);
        let pos = t.slice_rows(pos, 0, n)?;
        let pos = t.gather_rows(pos, &(0..b * n).map(|r| r % n).collect::<Vec<_>>())?;
        t.add(x, pos)
    }

    /// Causal self-attention step of a block: `x + SA(RMSN(x))`.
    pub fn self_attend(&self, t: &mut Tape<'_>, blk: &DecoderBlock, x: Var, seq_len: usize) -> Result<Var> {
        let rows = t.value(x).rows();
        let mask = if rows == seq_len { AttnMask::Causal } else { AttnMask::BlockCausal(seq_len) };
        let h = blk.norm_sa.forward(t, x)?;
        let a = blk.sa.forward(t, h, h, &mask)?;
        t.add(x, a.out)
    }

    /// Final hidden states before the output norm, plus allocation stats.
    pub fn hidden(&self, t: &mut Tape<'_>, prefixes: &[Vec<usize>], memory: &DecoderMemory) -> Result<(Var, MassStats)> {
        let n = prefixes.first().map_or(0, Vec::len) + 1;
        let mut x = self.inputs(t, prefixes)?;
        let mut mass = MassStats::default();
        for blk in &self.blocks {
            let xp = self.self_attend(t, blk, x, n)?;
            x = match (memory, self.cfg.fusion) {
                (DecoderMemory::PerStream(mems), Fusion::C | Fusion::D) => {
                    let mut outs = Vec::with_capacity(3);
                    for (br, m) in blk.branches.iter().zip(mems) {
                        outs.push(match m {
                            Some(m) => br.forward(t, xp, m)?.0,
                            None => xp,
                        });
                    }
                    if self.cfg.fusion == Fusion::D {
                        t.add_all(&outs)?
                    } else {
                        let gn = blk.gate_norm.as_ref().expect("gated").forward(t, xp)?;
                        let logits = blk.gate.as_ref().expect("gated").forward(t, gn)?;
                        let g = t.softmax_rows(logits, &AttnMask::None);
                        let gv = t.value(g);
                        for r in 0..gv.rows() {
                            for s in 0..3 {
                                mass.sum[s] += gv.at(r, s);
                            }
                        }
                        mass.count += gv.rows();
                        let mut parts = Vec::with_capacity(3);
                        for (s, o) in outs.into_iter().enumerate() {
                            let gs = t.slice_cols(g, s, 1)?;
                            parts.push(t.mul_col(o, gs)?);
                        }
                        t.add_all(&parts)?
                    }
                }
                (DecoderMemory::Shared { memory, ranges }, Fusion::A | Fusion::B) => {
                    let (y, probs) = blk.branches[0].forward(t, xp, memory)?;
                    for p in probs {
                        let pv = t.value(p);
                        for r in 0..pv.rows() {
                            let row = pv.row(r);
                            for (s, &(start, len)) in ranges.iter().enumerate() {
                                mass.sum[s] += row[start..start + len].iter().sum::<f64>();
                            }
                            mass.count += 1;
                        }
                    }
                    y
                }
                _ => {
                    return Err(GemsError::Contract(format!(
                        "memory layout does not match fusion mode {}",
                        self.cfg.fusion
                    )))
                }
            };
        }
        Ok((x, mass))
    }

    /// Level-`l` logits come from row `l` of each sequence, so they depend
    /// only on BOS and the codes of levels `< l`.
    pub fn forward(&self, t: &mut Tape<'_>, prefixes: &[Vec<usize>], memory: &DecoderMemory) -> Result<DecodeOut> {
        let (x, mass) = self.hidden(t, prefixes, memory)?;
        let b = prefixes.len();
        let k = prefixes[0].len();
        let n = k + 1;
        let h = self.norm.forward(t, x)?;
        let levels = k.min(self.depth() - 1) + 1;
        // unit-RMS hidden rows against unit-RMS code rows: keep logits O(1)
        let scale = 1.0 / (self.cfg.d_h as f64).sqrt();
        let mut logits = Vec::with_capacity(levels);
        for l in 0..levels {
            let idx: Vec<usize> = (0..b).map(|s| s * n + l).collect();
            let hl = if b == 1 && n == 1 { h } else { t.gather_rows(h, &idx)? };
            let table = t.param(self.out[l]);
            let lg = t.matmul_t(hl, false, table, true)?;
            logits.push(t.scale(lg, scale));
        }
        Ok(DecodeOut { logits, mass })
    }
}
