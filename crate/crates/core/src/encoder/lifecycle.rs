//! Lifecycle stream: offline compression of the oldest events into `M_c`
//! vectors with normalized linear attention, a file-backed store for the
//! compressed memories, and the online block that reads them back.

use std::collections::BTreeMap;
use std::path::Path;

use super::features::{FeatureEmbedder, ItemTable};
use crate::data::InteractionEvent;
use crate::error::{GemsError, Result};
use crate::nn::{EncoderBlock, Linear, RmsNorm};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::{AttnMask, ParamId, ParamStore, Tape, Tensor, Var};

/// Feature map applied to queries and keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phi {
    /// `elu(x) + 1`, strictly positive; enables row normalization.
    EluPlusOne,
    /// No feature map and no normalization; the sum is divided by `T_l`.
    Identity,
}

/// Local correction added to the linear term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delta {
    None,
    /// Exact softmax attention over the newest `w` tokens, scaled by a
    /// learned gate that starts at 0.
    LocalWindow(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleConfig {
    pub m_c: usize,
    pub d_h: usize,
    pub phi: Phi,
    pub delta: Delta,
    pub heads: usize,
    pub ffn_hidden: usize,
}

#[derive(Debug, Clone)]
pub struct QluCompressor {
    pub cfg: LifecycleConfig,
    pub seeds: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub gate: Option<ParamId>,
}

impl QluCompressor {
    pub fn new(store: &mut ParamStore, cfg: LifecycleConfig) -> Self {
        let d = cfg.d_h;
        QluCompressor {
            seeds: store.normal("lifecycle.qlu.seeds", cfg.m_c, d, 1.0),
            wq: Linear::new(store, "lifecycle.qlu.wq", d, d, false),
            wk: Linear::new(store, "lifecycle.qlu.wk", d, d, false),
            wv: Linear {
                w: store.normal("lifecycle.qlu.wv.w", d, d, 0.1 / (d as f64).sqrt()),
                b: None,
            },
            gate: matches!(cfg.delta, Delta::LocalWindow(_)).then(|| store.constant("lifecycle.qlu.gate", &[1, 1], 0.0)),
            cfg,
        }
    }

    fn phi(&self, t: &mut Tape<'_>, x: Var) -> Var {
        match self.cfg.phi {
            Phi::EluPlusOne => t.elu_plus_one(x),
            Phi::Identity => x,
        }
    }

    /// `M_c × d_h` memory for the token rows `x` (`T_l × d_h`), computed as
    /// `φ(Q) (φ(K)ᵀ V)` so no `T_l × T_l` matrix is formed.
    pub fn attend(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = t.value(x).rows();
        if n == 0 {
            return Err(GemsError::Contract("qlu_attend needs at least one token".into()));
        }
        let e = t.param(self.seeds);
        let ql = self.wq.forward(t, e)?;
        let q = self.phi(t, ql);
        let kl = self.wk.forward(t, x)?;
        let k = self.phi(t, kl);
        let v = self.wv.forward(t, x)?;
        let kv = t.matmul_t(k, true, v, false)?;
        let num = t.matmul(q, kv)?;
        let mut out = match self.cfg.phi {
            Phi::EluPlusOne => {
                let ones = t.constant(Tensor::full(&[1, n], 1.0));
                let ksum = t.matmul(ones, k)?;
                let den = t.matmul_t(q, false, ksum, true)?;
                let inv = t.recip(den);
                t.mul_col(num, inv)?
            }
            Phi::Identity => t.scale(num, 1.0 / n as f64),
        };
        if let (Delta::LocalWindow(w), Some(gate)) = (self.cfg.delta, self.gate) {
            let w = w.min(n);
            let xw = t.slice_rows(x, n - w, w)?;
            let kw = self.wk.forward(t, xw)?;
            let vw = self.wv.forward(t, xw)?;
            let s = t.matmul_t(ql, false, kw, true)?;
            let s = t.scale(s, 1.0 / (self.cfg.d_h as f64).sqrt());
            let p = t.softmax_rows(s, &AttnMask::None);
            let local = t.matmul(p, vw)?;
            let ones = t.constant(Tensor::full(&[self.cfg.m_c, 1], 1.0));
            let g = t.param(gate);
            let g = t.matmul(ones, g)?;
            let local = t.mul_col(local, g)?;
            out = t.add(out, local)?;
        }
        Ok(out)
    }
}

/// Quadratic-order reference for the linear term: builds the full
/// `M × T` score matrix `φ(Q) φ(K)ᵀ`, normalizes rows, then mixes `V`.
pub fn qlu_quadratic(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (m, n, d) = (q.rows(), k.rows(), v.cols());
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let scores: Vec<f64> = (0..n)
            .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = scores.iter().sum();
        for (j, s) in scores.iter().enumerate() {
            for (o, x) in out[i * d..(i + 1) * d].iter_mut().zip(v.row(j)) {
                *o += s / z * x;
            }
        }
    }
    Tensor::new(vec![m, d], out).expect("shape")
}

/// Contiguous chunk boundaries `floor(i·n/m)`.
pub fn chunk_bounds(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, (i + 1) * n / m)).collect()
}

/// Mean-pooled chunk rows of `x`; empty chunks are zero and marked absent.
pub fn chunk_means(x: &Tensor, m: usize) -> (Tensor, Vec<bool>) {
    let d = x.cols();
    let mut out = Tensor::zeros(&[m, d]);
    let mut present = vec![false; m];
    for (i, (a, b)) in chunk_bounds(x.rows(), m).into_iter().enumerate() {
        if b > a {
            present[i] = true;
            let row = out.row_mut(i);
            for r in a..b {
                row.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
            }
            row.iter_mut().for_each(|o| *o /= (b - a) as f64);
        }
    }
    (out, present)
}

/// `Σ_{i < M-1} ‖v_i − u_{i+1}‖²` over chunks that hold events. `u` is a
/// constant (stop-gradient) target.
pub fn recon_loss(t: &mut Tape<'_>, v: Var, u: &Tensor, present: &[bool]) -> Result<Var> {
    let m = u.rows();
    if m < 2 {
        log::warn!("reconstruction loss needs at least two slots; returning 0");
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let mask: Vec<f64> = present[1..].iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mask = t.constant(Tensor::new(vec![m - 1, 1], mask)?);
    let vs = t.slice_rows(v, 0, m - 1)?;
    let vs = t.mul_col(vs, mask)?;
    let target = Tensor::from_rows(&u.to_rows()[1..])?;
    let us = t.constant(target);
    let us = t.mul_col(us, mask)?;
    t.sq_dist(vs, us)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMemory {
    pub user_id: u64,
    /// `M_c × d_h`.
    pub vectors: Tensor,
    pub source_length: u64,
    pub version: u32,
    /// Set when the lifecycle stream held no events.
    pub empty: bool,
}

/// Embeds `events` with the frozen lifecycle embedder and compresses them.
#[allow(clippy::too_many_arguments)]
pub fn compress_offline(
    store: &ParamStore,
    embedder: &FeatureEmbedder,
    compressor: &QluCompressor,
    items: &ItemTable,
    user_id: u64,
    events: &[InteractionEvent],
    now: i64,
    version: u32,
) -> Result<CompressedMemory> {
    let (m, d) = (compressor.cfg.m_c, compressor.cfg.d_h);
    if events.is_empty() {
        return Ok(CompressedMemory {
            user_id,
            vectors: Tensor::zeros(&[m, d]),
            source_length: 0,
            version,
            empty: true,
        });
    }
    let mut t = Tape::with_params(store).no_grad();
    let x = embedder.embed(&mut t, events, now, items)?;
    let v = compressor.attend(&mut t, x)?;
    Ok(CompressedMemory {
        user_id,
        vectors: t.value(v).clone(),
        source_length: events.len() as u64,
        version,
        empty: false,
    })
}

/// Single bidirectional block over the retrieved memory.
#[derive(Debug, Clone)]
pub struct OnlineEncoder {
    pub block: EncoderBlock,
    pub norm: RmsNorm,
}

impl OnlineEncoder {
    pub fn new(store: &mut ParamStore, cfg: &LifecycleConfig) -> Self {
        OnlineEncoder {
            block: EncoderBlock::new(store, "lifecycle.online.block", cfg.d_h, cfg.heads, cfg.ffn_hidden),
            norm: RmsNorm::new(store, "lifecycle.online.norm", cfg.d_h),
        }
    }

    /// `None` for an empty memory: the decoder then skips the stream.
    pub fn encode(&self, t: &mut Tape<'_>, memory: Option<&CompressedMemory>) -> Result<Option<Var>> {
        match memory {
            Some(m) if !m.empty => {
                let x = t.constant(m.vectors.clone());
                let y = self.block.forward(t, x, &AttnMask::None)?;
                Ok(Some(self.norm.forward(t, y)?))
            }
            _ => Ok(None),
        }
    }
}

pub const MEMORY_MAGIC: &[u8; 8] = b"GEMSMEMS";
pub const MEMORY_FORMAT_VERSION: u32 = 1;
const RECORD_HEADER: usize = 16;

/// User id → compressed memory, persisted as one versioned binary file.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    pub m_c: usize,
    pub d_h: usize,
    pub manifest: String,
    entries: BTreeMap<u64, CompressedMemory>,
}

impl MemoryStore {
    pub fn new(m_c: usize, d_h: usize) -> Self {
        MemoryStore {
            m_c,
            d_h,
            manifest: String::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, memory: CompressedMemory) -> Result<()> {
        if memory.vectors.shape() != [self.m_c, self.d_h] {
            return Err(GemsError::Dimension {
                op: "memory_store.put",
                lhs: vec![self.m_c, self.d_h],
                rhs: memory.vectors.shape().to_vec(),
            });
        }
        if !memory.vectors.is_finite() {
            return Err(GemsError::Data(format!("user {}: non-finite memory", memory.user_id)));
        }
        self.entries.insert(memory.user_id, memory);
        Ok(())
    }

    /// `None` is an explicit miss.
    pub fn get(&self, user_id: u64) -> Option<&CompressedMemory> {
        self.entries.get(&user_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn record_size(&self) -> usize {
        RECORD_HEADER + 8 * self.m_c * self.d_h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MEMORY_MAGIC);
        b.extend_from_slice(&MEMORY_FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        b.extend_from_slice(self.manifest.as_bytes());
        b.extend_from_slice(&(self.m_c as u32).to_le_bytes());
        b.extend_from_slice(&(self.d_h as u32).to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (i, id) in self.entries.keys().enumerate() {
            b.extend_from_slice(&id.to_le_bytes());
            b.extend_from_slice(&((i * self.record_size()) as u64).to_le_bytes());
        }
        for m in self.entries.values() {
            b.extend_from_slice(&m.source_length.to_le_bytes());
            b.extend_from_slice(&m.version.to_le_bytes());
            b.extend_from_slice(&[u8::from(m.empty), 0, 0, 0]);
            for x in m.vectors.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |m: &str| GemsError::format(path, m);
        let mut cur = Cursor { b: bytes, at: 0 };
        if cur.take(8).ok_or_else(|| err("truncated header"))? != MEMORY_MAGIC {
            return Err(err("not a memory store (bad magic)"));
        }
        let version = cur.u32().ok_or_else(|| err("truncated header"))?;
        if version != MEMORY_FORMAT_VERSION {
            return Err(err(&format!("unsupported format version {version}")));
        }
        let mlen = cur.u32().ok_or_else(|| err("truncated manifest"))? as usize;
        let manifest = std::str::from_utf8(cur.take(mlen).ok_or_else(|| err("truncated manifest"))?)
            .map_err(|_| err("manifest is not UTF-8"))?
            .to_string();
        let m_c = cur.u32().ok_or_else(|| err("truncated header"))? as usize;
        let d_h = cur.u32().ok_or_else(|| err("truncated header"))? as usize;
        let count = cur.u64().ok_or_else(|| err("truncated header"))? as usize;
        let mut store = MemoryStore {
            m_c,
            d_h,
            manifest,
            entries: BTreeMap::new(),
        };
        let mut index = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = cur.u64().ok_or_else(|| err("truncated index"))?;
            let off = cur.u64().ok_or_else(|| err("truncated index"))? as usize;
            if index.last().is_some_and(|(prev, _)| *prev >= id) {
                return Err(err("index is not sorted by user id"));
            }
            index.push((id, off));
        }
        let payload = &bytes[cur.at..];
        let size = store.record_size();
        for (user_id, off) in index {
            let rec = payload
                .get(off..off + size)
                .ok_or_else(|| err(&format!("record for user {user_id} out of bounds")))?;
            let mut r = Cursor { b: rec, at: 0 };
            let source_length = r.u64().expect("sized");
            let version = r.u32().expect("sized");
            let flags = r.take(4).expect("sized")[0];
            let data = (0..m_c * d_h).map(|_| r.f64().expect("sized")).collect();
            store.entries.insert(
                user_id,
                CompressedMemory {
                    user_id,
                    vectors: Tensor::new(vec![m_c, d_h], data)?,
                    source_length,
                    version,
                    empty: flags & 1 == 1,
                },
            );
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GemsError::MissingArtifact {
                path: path.to_path_buf(),
                producer: "compress",
            });
        }
        MemoryStore::decode(&std::fs::read(path)?, &path.display().to_string())
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|s| f64::from_le_bytes(s.try_into().unwrap()))
    }
}
