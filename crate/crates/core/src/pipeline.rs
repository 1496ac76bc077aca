//! End-to-end phases shared by the CLI and the acceptance harness:
//! data → codebook → stage 0 + compression → stages 1–3 → evaluation.

use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{generate_synthetic, Dataset, Split};
use crate::encoder::features::ItemTable;
use crate::encoder::lifecycle::MemoryStore;
use crate::encoder::midterm::MidPath;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::model::{GemsModel, Vocab};
use crate::numerics::ParamStore;
use crate::quantizer::{fit_residual_kmeans, Codebook, SidIndex};
use crate::training::{compress_all, examples, LossReport, Trainer};

/// Data plus its tokenization.
pub struct Prepared {
    pub data: Dataset,
    pub codebook: Codebook,
    pub sids: SidIndex,
    pub items: ItemTable,
}

impl Prepared {
    pub fn new(data: Dataset, codebook: Codebook) -> Result<Self> {
        let pairs: Vec<(u64, Vec<f64>)> = data.catalog.iter().map(|c| (c.vid, c.vector.clone())).collect();
        let sids = SidIndex::build(&pairs, &codebook)?;
        Self::with_sids(data, codebook, sids)
    }

    pub fn with_sids(data: Dataset, codebook: Codebook, sids: SidIndex) -> Result<Self> {
        let vids: Vec<u64> = data.catalog.iter().map(|c| c.vid).collect();
        let items = ItemTable::from_sids(&vids, &sids)?;
        Ok(Prepared { data, codebook, sids, items })
    }
}

pub fn quantize(cfg: &RunConfig, data: &Dataset) -> Result<Codebook> {
    let vectors: Vec<Vec<f64>> = data.catalog.iter().map(|c| c.vector.clone()).collect();
    fit_residual_kmeans(&vectors, &cfg.quantizer.sizes, cfg.seed)
}

/// Synthetic data and its codebook for `cfg`.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.synth(), cfg.seed)?;
    let cb = quantize(cfg, &data)?;
    Prepared::new(data, cb)
}

/// A freshly initialized model.
pub fn build_model(cfg: &RunConfig, prep: &Prepared) -> Result<(ParamStore, GemsModel)> {
    let mut store = ParamStore::new(cfg.seed);
    let model = GemsModel::new(&mut store, cfg.model_config()?, Vocab::of(&prep.data), &prep.codebook.sizes())?;
    model.init_codes(&mut store, &prep.codebook)?;
    Ok((store, model))
}

/// Stage 0 on the training users. Returns its reports.
pub fn train_compressor(cfg: &RunConfig, prep: &Prepared, store: &mut ParamStore, model: &GemsModel) -> Result<Vec<LossReport>> {
    let exs = examples(&prep.data, Split::Train, &prep.items);
    let mut tr = Trainer::new(model, &prep.items, cfg.train_config(0)?);
    if model.cfg.streams.lifecycle {
        tr.run_stage0(store, &exs)?;
    }
    Ok(tr.reports)
}

pub fn compress(cfg: &RunConfig, prep: &Prepared, store: &ParamStore, model: &GemsModel) -> Result<MemoryStore> {
    compress_all(store, model, &prep.items, &prep.data, crate::config::ARTIFACT_FORMAT, cfg.workers.max(1))
}

/// Stages 1–3 with one optimizer carried across them.
pub fn train_main(
    cfg: &RunConfig,
    prep: &Prepared,
    store: &mut ParamStore,
    model: &GemsModel,
    memories: &MemoryStore,
) -> Result<Vec<LossReport>> {
    let exs = examples(&prep.data, Split::Train, &prep.items);
    let mut tr = Trainer::new(model, &prep.items, cfg.train_config(1)?);
    for stage in 1..=3 {
        let t0 = Instant::now();
        let steps = tr.run_stage(store, stage, &exs, memories)?;
        let last = tr.reports.last().map_or(0.0, |r| r.ntp);
        log::info!("stage {stage}: {steps} steps in {:.1}s, ntp {last:.4}", t0.elapsed().as_secs_f64());
    }
    Ok(tr.reports)
}

/// The path used at inference: sparse once stage 3 has run.
pub fn inference_path(cfg: &RunConfig) -> MidPath {
    if cfg.train.steps[3] > 0 {
        MidPath::Sparse(cfg.model.top_k)
    } else {
        MidPath::Dense
    }
}

pub fn evaluate_run(
    cfg: &RunConfig,
    prep: &Prepared,
    store: &ParamStore,
    model: &GemsModel,
    memories: &MemoryStore,
    label: &str,
) -> Result<EvalReport> {
    let (users, mass) = evaluate(
        store,
        model,
        &prep.items,
        &prep.sids,
        &prep.data,
        memories,
        inference_path(cfg),
        &cfg.eval.ks,
        cfg.workers.max(1),
    )?;
    Ok(EvalReport::from_users(label, &cfg.eval.ks, &users, &mass, &cfg.hash(), cfg.seed))
}

pub struct Outcome {
    pub report: EvalReport,
    pub losses: Vec<LossReport>,
    pub store: ParamStore,
    pub seconds: f64,
}

/// Trains and evaluates one configuration on prepared data.
pub fn run(cfg: &RunConfig, prep: &Prepared, label: &str) -> Result<Outcome> {
    let t0 = Instant::now();
    let (mut store, model) = build_model(cfg, prep)?;
    let mut losses = train_compressor(cfg, prep, &mut store, &model)?;
    let memories = compress(cfg, prep, &store, &model)?;
    losses.extend(train_main(cfg, prep, &mut store, &model, &memories)?);
    let report = evaluate_run(cfg, prep, &store, &model, &memories, label)?;
    Ok(Outcome {
        report,
        losses,
        store,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// One row of the indexer latency table.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyRow {
    pub length: usize,
    pub top_k: usize,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    /// `sparse_ms / dense_ms`.
    pub ratio: f64,
    /// Same ratio under the attention cost model.
    pub flops_ratio: f64,
}

/// Median wall-clock of the mid-term encoder forward, full attention versus
/// indexer-selected sparse attention, on random inputs of each length.
pub fn indexer_latency(cfg: &RunConfig, lengths: &[usize], top_k: usize, reps: usize) -> Result<Vec<LatencyRow>> {
    use crate::encoder::midterm::{attention_flops, HeadMix, MidConfig, MidEncoder};
    use crate::numerics::Tensor;
    use rand::SeedableRng;

    let m = cfg.model_config()?;
    let budget = lengths.iter().copied().max().unwrap_or(1);
    let mc = MidConfig {
        budget,
        d_h: m.d_h,
        layers: 1,
        heads: m.heads,
        ffn_hidden: m.ffn_mult * m.d_h,
        idx_heads: m.idx_heads,
        idx_dim: m.idx_dim,
        head_mix: HeadMix::Softplus,
    };
    let mut store = ParamStore::new(cfg.seed);
    let enc = MidEncoder::new(&mut store, mc.clone(), true);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let median = |xs: &mut Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    };
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let h = Tensor::randn(n, m.d_h, 1.0, &mut rng);
        let time = |path| -> Result<f64> {
            let mut xs = Vec::with_capacity(reps.max(1));
            for _ in 0..reps.max(1) {
                let t0 = Instant::now();
                std::hint::black_box(enc.infer(&store, &h, path)?);
                xs.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            Ok(median(&mut xs))
        };
        let dense_ms = time(MidPath::Dense)?;
        let sparse_ms = time(MidPath::Sparse(top_k))?;
        rows.push(LatencyRow {
            length: n,
            top_k,
            dense_ms,
            sparse_ms,
            ratio: sparse_ms / dense_ms,
            flops_ratio: attention_flops(&mc, n, MidPath::Sparse(top_k)) / attention_flops(&mc, n, MidPath::Dense),
        });
    }
    Ok(rows)
}

pub fn latency_table(rows: &[LatencyRow]) -> String {
    let mut out = format!("{:>7}  {:>5}  {:>10}  {:>10}  {:>6}  {:>11}\n", "L_m", "K", "dense_ms", "sparse_ms", "ratio", "flops_ratio");
    for r in rows {
        out.push_str(&format!(
            "{:>7}  {:>5}  {:>10.2}  {:>10.2}  {:>6.3}  {:>11.3}\n",
            r.length, r.top_k, r.dense_ms, r.sparse_ms, r.ratio, r.flops_ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::profile;

    #[test]
    fn toy_run_is_deterministic() {
        let mut cfg = profile("toy").unwrap();
        cfg.train.steps = [3, 4, 2, 2];
        cfg.data.users = 60;
        let prep = prepare(&cfg).unwrap();
        let a = run(&cfg, &prep, "a").unwrap();
        let b = run(&cfg, &prep, "a").unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.prefix_dominance());
        assert_eq!(a.losses.len(), 11);
        assert!(a.report.hrecall.iter().chain(&a.report.recall).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn latency_rows_cover_each_length() {
        let cfg = profile("toy").unwrap();
        let rows = indexer_latency(&cfg, &[16, 64], 8, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.dense_ms > 0.0 && r.flops_ratio > 0.0));
        assert_eq!(latency_table(&rows).lines().count(), 3);
    }
}
