//! Losses, the staged schedule (stage 0 compressor, then full-attention,
//! indexer and sparse stages), and the optimization loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{segment, Dataset, InteractionEvent, Split};
use crate::encoder::features::ItemTable;
use crate::encoder::lifecycle::{chunk_means, compress_offline, recon_loss, MemoryStore};
use crate::encoder::midterm::{indexer_loss, MidPath};
use crate::error::{GemsError, Result};
use crate::model::{GemsModel, STAGE0_PREFIXES};
use crate::numerics::{Adam, ParamId, ParamStore, Precision, Tape, Var};

/// `mean_l CE(logits_l, target codes at level l)`, each level averaged over
/// the rows (sequences) of the batch.
pub fn ntp_loss(t: &mut Tape<'_>, logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    if logits.is_empty() {
        return Err(GemsError::Contract("ntp_loss needs at least one level".into()));
    }
    let mut parts = Vec::with_capacity(logits.len());
    for (l, &lg) in logits.iter().enumerate() {
        let codes: Vec<usize> = targets
            .iter()
            .map(|s| {
                s.get(l)
                    .copied()
                    .ok_or_else(|| GemsError::Data(format!("target has no level-{l} code")))
            })
            .collect::<Result<_>>()?;
        parts.push(t.cross_entropy(lg, &codes)?);
    }
    let sum = t.add_all(&parts)?;
    Ok(t.scale(sum, 1.0 / logits.len() as f64))
}

/// One held-out prediction: everything before the target, and its code.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub user_id: u64,
    pub history: &'a [InteractionEvent],
    pub now: i64,
    pub vid: u64,
    pub sid: Vec<usize>,
}

/// Leave-one-out examples of one split; targets without a code are skipped.
pub fn examples<'a>(ds: &'a Dataset, split: Split, items: &ItemTable) -> Vec<Example<'a>> {
    ds.split(split)
        .into_iter()
        .filter(|u| u.len() >= 2)
        .filter_map(|u| {
            let (history, target) = u.split_target();
            items.codes_of(target.vid).map(|c| Example {
                user_id: u.user_id,
                history,
                now: target.ts,
                vid: target.vid,
                sid: c.to_vec(),
            })
        })
        .collect()
}

/// When a stage ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transition {
    /// Exactly `steps[stage]` steps per stage.
    Fixed { steps: [usize; 4] },
    /// Ends when the moving average of the monitored loss over `window`
    /// steps improves by less than `threshold` (relative) against the
    /// previous window, or after `max_steps[stage]`.
    Plateau {
        window: usize,
        threshold: f64,
        max_steps: [usize; 4],
    },
}

impl Transition {
    pub const DEFAULT_WINDOW: usize = 200;
    pub const DEFAULT_THRESHOLD: f64 = 0.005;

    pub fn budget(&self, stage: u8) -> usize {
        match self {
            Transition::Fixed { steps } => steps[stage as usize],
            Transition::Plateau { max_steps, .. } => max_steps[stage as usize],
        }
    }

    /// Whether the loss history of the current stage has plateaued.
    pub fn plateaued(&self, losses: &[f64]) -> bool {
        match *self {
            Transition::Fixed { .. } => false,
            Transition::Plateau { window, threshold, .. } => {
                if window == 0 || losses.len() < 2 * window {
                    return false;
                }
                let n = losses.len();
                let cur: f64 = losses[n - window..].iter().sum::<f64>() / window as f64;
                let prev: f64 = losses[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
                prev <= 0.0 || (prev - cur) / prev.abs() < threshold
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub lambda: f64,
    pub sparse_active: bool,
    pub top_k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub transition: Transition,
    pub workers: usize,
    pub precision: Precision,
}

impl TrainConfig {
    /// The stage's required λ and sparse switch.
    pub fn at_stage(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            stage,
            lambda: if stage >= 2 { 1.0 } else { 0.0 },
            sparse_active: stage == 3,
            ..self.clone()
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let ok = match self.stage {
            0 | 1 => self.lambda == 0.0 && !self.sparse_active,
            2 => self.lambda == 1.0 && !self.sparse_active,
            3 => self.lambda == 1.0 && self.sparse_active,
            s => return Err(GemsError::config("train.stage", format!("unknown stage {s}"))),
        };
        if !ok {
            return Err(GemsError::config(
                "train.lambda",
                format!(
                    "stage {} requires lambda = {} and sparse = {}",
                    self.stage,
                    if self.stage >= 2 { 1 } else { 0 },
                    self.stage == 3
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(GemsError::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(GemsError::config("train.lr", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(GemsError::config("model.top_k", "must be at least 1"));
        }
        Ok(())
    }

    pub fn mid_path(&self) -> MidPath {
        if self.sparse_active {
            MidPath::Sparse(self.top_k)
        } else {
            MidPath::Dense
        }
    }
}

/// One optimization step's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: u8,
    pub ntp: f64,
    pub indexer: f64,
    pub recon: f64,
    pub lambda: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl LossReport {
    /// The loss that decides the stage transition.
    pub fn monitored(&self) -> f64 {
        match self.stage {
            0 => self.recon,
            2 => self.indexer,
            _ => self.ntp,
        }
    }
}

/// Writes reports as one JSON object per line.
pub fn write_reports<W: Write>(w: &mut W, reports: &[LossReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut *w, r).map_err(|e| GemsError::Data(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

type Grads = Vec<(ParamId, Vec<f64>)>;

fn add_grads(acc: &mut Grads, more: Grads) {
    if acc.is_empty() {
        *acc = more;
        return;
    }
    for (id, g) in more {
        match acc.iter_mut().find(|(a, _)| *a == id) {
            Some((_, a)) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => acc.push((id, g)),
        }
    }
}

/// Splits `items` into `workers` contiguous chunks, runs `f` on each (in
/// parallel when `workers > 1`), and returns the results in chunk order.
fn par_chunks<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&[T]) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return vec![f(items)];
    }
    let size = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(size).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Owns the optimizer state across stages.
pub struct Trainer<'m> {
    pub model: &'m GemsModel,
    pub items: &'m ItemTable,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub step: usize,
    pub reports: Vec<LossReport>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m GemsModel, items: &'m ItemTable, cfg: TrainConfig) -> Self {
        Trainer {
            model,
            items,
            adam: Adam::new(cfg.lr).with_precision(cfg.precision),
            cfg,
            step: 0,
            reports: Vec::new(),
        }
    }

    /// Loss terms of a batch on one tape: mean NTP and mean indexer loss.
    pub fn batch_terms(
        &self,
        t: &mut Tape<'_>,
        batch: &[&Example<'_>],
        memories: &MemoryStore,
        cfg: &TrainConfig,
    ) -> Result<(Var, Option<Var>)> {
        let scale = 1.0 / batch.len() as f64;
        let mut ntp = Vec::with_capacity(batch.len());
        let mut idx = Vec::new();
        for ex in batch {
            let enc = self.model.encode(
                t,
                ex.history,
                ex.now,
                self.items,
                memories.get(ex.user_id),
                cfg.mid_path(),
                cfg.lambda > 0.0,
            )?;
            // the last code is only ever a target, never an input
            let prefix = ex.sid[..ex.sid.len() - 1].to_vec();
            let out = self.model.decoder.forward(t, &[prefix], &enc.memory)?;
            ntp.push(ntp_loss(t, &out.logits, std::slice::from_ref(&ex.sid))?);
            if cfg.lambda > 0.0 && !enc.s_mid.is_empty() {
                idx.push(indexer_loss(t, &enc.s_mid, &enc.s_idx, None)?);
            }
        }
        let n = t.add_all(&ntp)?;
        let n = t.scale(n, scale);
        let i = if idx.is_empty() {
            None
        } else {
            let s = t.add_all(&idx)?;
            Some(t.scale(s, scale))
        };
        Ok((n, i))
    }

    /// One optimization step on `batch` under `cfg`.
    pub fn train_step(&mut self, store: &mut ParamStore, batch: &[&Example<'_>], memories: &MemoryStore, cfg: &TrainConfig) -> Result<LossReport> {
        cfg.validate()?;
        let start = Instant::now();
        let total_n = batch.len() as f64;
        let this = &*self;
        let snapshot = &*store;
        let results = par_chunks(batch, cfg.workers, |chunk| -> Result<(f64, f64, Grads)> {
            let mut t = Tape::with_params(snapshot).with_precision(cfg.precision);
            for p in STAGE0_PREFIXES {
                t.freeze(p);
            }
            let (ntp, idx) = this.batch_terms(&mut t, chunk, memories, cfg)?;
            // chunk means are re-weighted so the step sees the batch mean
            let w = chunk.len() as f64 / total_n;
            let mut loss = t.scale(ntp, w);
            let mut iv = 0.0;
            if let Some(i) = idx {
                iv = t.value(i).item() * w;
                let si = t.scale(i, cfg.lambda * w);
                loss = t.add(loss, si)?;
            }
            let nv = t.value(ntp).item() * w;
            t.backward(loss)?;
            let g = t.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
            Ok((nv, iv, g))
        });
        let mut grads = Vec::new();
        let (mut ntp, mut idx) = (0.0, 0.0);
        for r in results {
            let (n, i, g) = r?;
            ntp += n;
            idx += i;
            add_grads(&mut grads, g);
        }
        self.adam.step(store, &grads);
        self.step += 1;
        let report = LossReport {
            step: self.step,
            stage: cfg.stage,
            ntp,
            indexer: idx,
            recon: 0.0,
            lambda: cfg.lambda,
            total: ntp + cfg.lambda * idx,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Runs one of stages 1–3 until its transition fires.
    pub fn run_stage(&mut self, store: &mut ParamStore, stage: u8, data: &[Example<'_>], memories: &MemoryStore) -> Result<usize> {
        let cfg = self.cfg.at_stage(stage);
        cfg.validate()?;
        if stage == 0 {
            return Err(GemsError::config("train.stage", "stage 0 runs through run_stage0"));
        }
        if data.is_empty() {
            return Err(GemsError::Data("no training examples".into()));
        }
        let budget = cfg.transition.budget(stage);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + u64::from(stage)));
        let mut cursor = data.len();
        let mut monitored = Vec::new();
        let mut steps = 0;
        while steps < budget {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let r = self.train_step(store, &batch, memories, &cfg)?;
            if !r.total.is_finite() {
                return Err(GemsError::Data(format!("non-finite loss at step {}", r.step)));
            }
            monitored.push(r.monitored());
            steps += 1;
            if cfg.transition.plateaued(&monitored) {
                log::info!("stage {stage} plateaued after {steps} steps");
                break;
            }
        }
        Ok(steps)
    }

    /// Stage 0: fits the compressor with the reconstruction loss on the
    /// lifecycle streams of `data`. Only `lifecycle.qlu.*` moves.
    pub fn run_stage0(&mut self, store: &mut ParamStore, data: &[Example<'_>]) -> Result<usize> {
        let cfg = self.cfg.at_stage(0);
        cfg.validate()?;
        let m = self.model;
        let (r, l) = (m.cfg.recent, m.cfg.lifecycle_threshold);
        let usable: Vec<&Example<'_>> = data
            .iter()
            .filter(|e| segment(e.history, r, l).is_ok_and(|b| b.lifecycle.len() >= 2))
            .collect();
        if usable.is_empty() {
            log::warn!("no lifecycle events to train the compressor on; skipping stage 0");
            return Ok(0);
        }
        let budget = cfg.transition.budget(0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
        let mut monitored = Vec::new();
        let mut steps = 0;
        while steps < budget {
            let start = Instant::now();
            let batch: Vec<&&Example<'_>> = usable.choose_multiple(&mut rng, cfg.batch_size.min(usable.len())).collect();
            let mut t = Tape::with_params(store).with_precision(cfg.precision);
            let mut parts = Vec::with_capacity(batch.len());
            for ex in &batch {
                let life = segment(ex.history, r, l)?.lifecycle;
                // only the compressor learns here; the token features are inputs
                let x = m.life_embed.embed(&mut t, life, ex.now, self.items)?;
                let x = t.detach(x);
                let (u, present) = chunk_means(t.value(x), m.cfg.m_c);
                let v = m.qlu.attend(&mut t, x)?;
                parts.push(recon_loss(&mut t, v, &u, &present)?);
            }
            let s = t.add_all(&parts)?;
            let loss = t.scale(s, 1.0 / batch.len() as f64);
            let value = t.value(loss).item();
            t.backward(loss)?;
            let grads: Grads = t.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
            drop(t);
            self.adam.step(store, &grads);
            self.step += 1;
            steps += 1;
            self.reports.push(LossReport {
                step: self.step,
                stage: 0,
                ntp: 0.0,
                indexer: 0.0,
                recon: value,
                lambda: 0.0,
                total: value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            monitored.push(value);
            if cfg.transition.plateaued(&monitored) {
                break;
            }
        }
        Ok(steps)
    }
}

/// Compresses the lifecycle stream of every user's held-out history.
pub fn compress_all(
    store: &ParamStore,
    model: &GemsModel,
    items: &ItemTable,
    ds: &Dataset,
    version: u32,
    workers: usize,
) -> Result<MemoryStore> {
    let (r, l) = (model.cfg.recent, model.cfg.lifecycle_threshold);
    let users: Vec<_> = ds.users.iter().filter(|u| u.len() >= 2).collect();
    let chunks = par_chunks(&users, workers, |chunk| -> Result<Vec<_>> {
        chunk
            .iter()
            .map(|u| {
                let (hist, target) = u.split_target();
                let life = segment(hist, r, l)?.lifecycle;
                compress_offline(store, &model.life_embed, &model.qlu, items, u.user_id, life, target.ts, version)
            })
            .collect()
    });
    let mut ms = MemoryStore::new(model.cfg.m_c, model.cfg.d_h);
    for c in chunks {
        for m in c? {
            ms.put(m)?;
        }
    }
    Ok(ms)
}
