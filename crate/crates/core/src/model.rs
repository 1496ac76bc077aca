//! Full encoder–decoder assembly: segmentation, the three stream encoders,
//! memory layout per fusion mode, and the semantic-ID decoder.

use std::sync::Arc;

use rand::Rng;

use crate::data::{segment, Dataset, InteractionEvent};
use crate::decoder::{Decoder, DecoderConfig, DecoderMemory, Fusion, StreamMemory};
use crate::encoder::features::{FeatureConfig, FeatureEmbedder, ItemTable};
use crate::encoder::lifecycle::{CompressedMemory, Delta, LifecycleConfig, OnlineEncoder, Phi, QluCompressor};
use crate::encoder::midterm::{HeadMix, MidConfig, MidEncoder, MidPath};
use crate::encoder::recent::{RecentConfig, RecentEncoder};
use crate::error::{GemsError, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::quantizer::Codebook;

/// Parameter prefixes trained only in stage 0 and frozen afterwards.
pub const STAGE0_PREFIXES: [&str; 2] = ["lifecycle.embed.", "lifecycle.qlu."];
/// Parameters driven only by the indexer loss.
pub const INDEXER_PREFIX: &str = "mid.indexer.";

/// Which streams feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Streams {
    pub recent: bool,
    pub mid: bool,
    pub lifecycle: bool,
}

impl Streams {
    pub const ALL: Streams = Streams {
        recent: true,
        mid: true,
        lifecycle: true,
    };

    /// The four ablation settings, full model first.
    pub const ABLATIONS: [Streams; 4] = [
        Streams::ALL,
        Streams {
            recent: true,
            mid: true,
            lifecycle: false,
        },
        Streams {
            recent: true,
            mid: false,
            lifecycle: true,
        },
        Streams {
            recent: true,
            mid: false,
            lifecycle: false,
        },
    ];

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.recent {
            parts.push("recent");
        }
        if self.mid {
            parts.push("mid");
        }
        if self.lifecycle {
            parts.push("lifecycle");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_h: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Recent threshold `R`.
    pub recent: usize,
    /// Lifecycle threshold `L`.
    pub lifecycle_threshold: usize,
    pub recent_layers: usize,
    pub mid_layers: usize,
    pub decoder_layers: usize,
    pub idx_heads: usize,
    pub idx_dim: usize,
    pub top_k: usize,
    pub m_c: usize,
    pub phi: Phi,
    pub delta: Delta,
    pub fusion: Fusion,
    pub tied: bool,
    pub streams: Streams,
    /// Add the item's semantic-ID code embeddings to each event row.
    pub code_features: bool,
    /// Lifecycle tokens kept (strided) by the shared encoder of mode a.
    pub shared_lifecycle_budget: usize,
}

impl ModelConfig {
    pub fn mid_budget(&self) -> usize {
        self.lifecycle_threshold - self.recent
    }

    pub fn validate(&self) -> Result<()> {
        crate::data::segment::check_thresholds(self.recent, self.lifecycle_threshold)?;
        let pos = |field: &str, v: usize| {
            if v == 0 {
                Err(GemsError::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        pos("model.d_h", self.d_h)?;
        pos("model.heads", self.heads)?;
        pos("model.feature_dim", self.feature_dim)?;
        pos("model.m_c", self.m_c)?;
        pos("model.top_k", self.top_k)?;
        pos("model.idx_heads", self.idx_heads)?;
        pos("model.idx_dim", self.idx_dim)?;
        pos("model.decoder_layers", self.decoder_layers)?;
        if !self.d_h.is_multiple_of(self.heads) {
            return Err(GemsError::config("model.heads", format!("must divide d_h = {}", self.d_h)));
        }
        if self.idx_heads >= self.heads {
            return Err(GemsError::config("model.idx_heads", "must be smaller than model.heads"));
        }
        if !(self.streams.recent || self.streams.mid || self.streams.lifecycle) {
            return Err(GemsError::config("model.streams", "at least one stream must be enabled"));
        }
        Ok(())
    }
}

/// Embedding-table sizes taken from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_items: usize,
    pub n_authors: usize,
    pub n_tags: usize,
    pub n_labels: usize,
}

impl Vocab {
    pub fn of(ds: &Dataset) -> Self {
        let (aid, tag) = ds.id_ranges();
        Vocab {
            n_items: ds.catalog.len(),
            n_authors: aid as usize + 1,
            n_tags: tag as usize + 1,
            n_labels: 4,
        }
    }
}

/// Memory handed to the decoder plus the mid-term score matrices.
pub struct Encoded {
    pub memory: DecoderMemory,
    pub s_mid: Vec<Var>,
    pub s_idx: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct GemsModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub embed: FeatureEmbedder,
    pub recent: RecentEncoder,
    pub mid: MidEncoder,
    pub life_embed: FeatureEmbedder,
    pub qlu: QluCompressor,
    pub online: OnlineEncoder,
    pub shared: Option<RecentEncoder>,
    pub decoder: Decoder,
}

impl GemsModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, vocab: Vocab, sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_h;
        let ffn = cfg.ffn_mult * d;
        let decoder = Decoder::new(
            store,
            DecoderConfig {
                d_h: d,
                layers: cfg.decoder_layers,
                heads: cfg.heads,
                ffn_hidden: ffn,
                sizes: sizes.to_vec(),
                fusion: cfg.fusion,
                tied: cfg.tied,
            },
        );
        let fc = FeatureConfig {
            d_h: d,
            feature_dim: cfg.feature_dim,
            n_items: vocab.n_items,
            n_authors: vocab.n_authors,
            n_tags: vocab.n_tags,
            n_labels: vocab.n_labels,
        };
        let codes = if cfg.code_features { decoder.codes.clone() } else { Vec::new() };
        let embed = FeatureEmbedder::new(store, "embed", fc.clone(), codes.clone());
        let recent = RecentEncoder::new(
            store,
            RecentConfig {
                r: cfg.recent,
                d_h: d,
                layers: cfg.recent_layers,
                heads: cfg.heads,
                ffn_hidden: ffn,
            },
        );
        let mid = MidEncoder::new(
            store,
            MidConfig {
                budget: cfg.mid_budget(),
                d_h: d,
                layers: cfg.mid_layers,
                heads: cfg.heads,
                ffn_hidden: ffn,
                idx_heads: cfg.idx_heads,
                idx_dim: cfg.idx_dim,
                head_mix: HeadMix::Softplus,
            },
            true,
        );
        let lc = LifecycleConfig {
            m_c: cfg.m_c,
            d_h: d,
            phi: cfg.phi,
            delta: cfg.delta,
            heads: cfg.heads,
            ffn_hidden: ffn,
        };
        let life_embed = FeatureEmbedder::new(store, "lifecycle.embed", fc, codes);
        let qlu = QluCompressor::new(store, lc.clone());
        let online = OnlineEncoder::new(store, &lc);
        let shared = (cfg.fusion == Fusion::A).then(|| {
            RecentEncoder::with_prefix(
                store,
                "shared",
                RecentConfig {
                    r: cfg.shared_lifecycle_budget + cfg.lifecycle_threshold,
                    d_h: d,
                    layers: cfg.recent_layers,
                    heads: cfg.heads,
                    ffn_hidden: ffn,
                },
            )
        });
        Ok(GemsModel {
            cfg,
            vocab,
            embed,
            recent,
            mid,
            life_embed,
            qlu,
            online,
            shared,
            decoder,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.decoder.cfg.sizes
    }

    /// Seeds the decoder code tables from the quantizer centroids: each
    /// level is zero-padded (or randomly projected) to `d_h` and rescaled
    /// to unit mean RMS over the occupied width, so row norms do not grow
    /// with `d_h`.
    pub fn init_codes(&self, store: &mut ParamStore, codebook: &Codebook) -> Result<()> {
        if codebook.sizes() != self.sizes() {
            return Err(GemsError::config("codebook.sizes", "codebook does not match the decoder levels"));
        }
        let d = self.cfg.d_h;
        let width = codebook.width();
        let proj = (width > d).then(|| {
            let mut rng = store.rng_for("decoder.code.projection");
            let s = 1.0 / (d as f64).sqrt();
            (0..width * d).map(|_| rng.gen_range(-1.0..1.0) * s).collect::<Vec<f64>>()
        });
        for (l, &id) in self.decoder.codes.iter().enumerate() {
            let c = codebook.level(l);
            let mut out = Tensor::zeros(&[c.rows(), d]);
            for i in 0..c.rows() {
                let row = out.row_mut(i);
                match &proj {
                    None => row[..width].copy_from_slice(c.row(i)),
                    Some(p) => {
                        for (a, x) in c.row(i).iter().enumerate() {
                            for (j, r) in row.iter_mut().enumerate() {
                                *r += x * p[a * d + j];
                            }
                        }
                    }
                }
            }
            let ms = out.data().iter().map(|x| x * x).sum::<f64>() / out.rows() as f64;
            let rms = (ms / width.min(d) as f64).sqrt();
            if rms > 0.0 {
                out.data_mut().iter_mut().for_each(|x| *x /= rms);
            }
            *store.get_mut(id) = out;
        }
        Ok(())
    }

    /// Encodes one user's history into decoder memory. `now` is the request
    /// time; `lifecycle` is the user's stored compressed memory.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        t: &mut Tape<'_>,
        history: &[InteractionEvent],
        now: i64,
        items: &ItemTable,
        lifecycle: Option<&CompressedMemory>,
        path: MidPath,
        scores: bool,
    ) -> Result<Encoded> {
        let c = &self.cfg;
        let b = segment(history, c.recent, c.lifecycle_threshold)?;
        let mut s_mid = Vec::new();
        let mut s_idx = Vec::new();
        if c.fusion == Fusion::A {
            let shared = self.shared.as_ref().expect("mode a has a shared encoder");
            let life: Vec<InteractionEvent> = if c.streams.lifecycle {
                strided(b.lifecycle, c.shared_lifecycle_budget)
            } else {
                Vec::new()
            };
            let mid: &[InteractionEvent] = if c.streams.mid { b.mid_term } else { &[] };
            let rec: &[InteractionEvent] = if c.streams.recent { b.recent } else { &[] };
            let tokens: Vec<InteractionEvent> = life.iter().chain(mid).chain(rec).copied().collect();
            let width = shared.cfg.r;
            let pad = width - tokens.len();
            let ranges = [(pad + life.len() + mid.len(), rec.len()), (pad + life.len(), mid.len()), (pad, life.len())];
            let (h, mask) = shared.embed_events(t, &self.embed, &tokens, now, items)?;
            let value = shared.encode(t, h, &mask)?;
            return Ok(Encoded {
                memory: DecoderMemory::Shared {
                    memory: StreamMemory {
                        value,
                        keys: Some(mask),
                    },
                    ranges,
                },
                s_mid,
                s_idx,
            });
        }

        let recent = if c.streams.recent && !b.recent.is_empty() {
            let (h, mask) = self.recent.embed_events(t, &self.embed, b.recent, now, items)?;
            Some(StreamMemory {
                value: self.recent.encode(t, h, &mask)?,
                keys: Some(mask),
            })
        } else {
            None
        };
        let mid = if c.streams.mid && !b.mid_term.is_empty() {
            let h = self.embed.embed(t, b.mid_term, now, items)?;
            let o = self.mid.forward(t, h, None, path, scores)?;
            s_mid = o.s_mid;
            s_idx = o.s_idx;
            Some(StreamMemory::new(o.out))
        } else {
            None
        };
        let life = if c.streams.lifecycle {
            self.online.encode(t, lifecycle)?.map(StreamMemory::new)
        } else {
            None
        };
        let memory = match c.fusion {
            Fusion::B => concat_memories(t, [recent, mid, life])?,
            _ => DecoderMemory::PerStream([recent, mid, life]),
        };
        Ok(Encoded { memory, s_mid, s_idx })
    }
}

/// `budget` evenly strided events (all of them when shorter).
pub fn strided(events: &[InteractionEvent], budget: usize) -> Vec<InteractionEvent> {
    if events.len() <= budget {
        return events.to_vec();
    }
    (0..budget).map(|i| events[i * events.len() / budget]).collect()
}

fn concat_memories(t: &mut Tape<'_>, mems: [Option<StreamMemory>; 3]) -> Result<DecoderMemory> {
    let mut values = Vec::new();
    let mut keys = Vec::new();
    let mut ranges = [(0, 0); 3];
    let mut at = 0;
    for (s, m) in mems.iter().enumerate() {
        if let Some(m) = m {
            let n = t.value(m.value).rows();
            ranges[s] = (at, n);
            at += n;
            values.push(m.value);
            match &m.keys {
                Some(k) => keys.extend_from_slice(k),
                None => keys.extend(std::iter::repeat_n(true, n)),
            }
        }
    }
    if values.is_empty() {
        return Err(GemsError::Data("history produced no memory for any enabled stream".into()));
    }
    let value = if values.len() == 1 { values[0] } else { t.concat_rows(&values)? };
    let keys: Arc<[bool]> = keys.into();
    Ok(DecoderMemory::Shared {
        memory: StreamMemory { value, keys: Some(keys) },
        ranges,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, PlantSpec, SynthConfig};
    use crate::quantizer::{fit_residual_kmeans, SidIndex};

    pub(crate) fn tiny_cfg(fusion: Fusion) -> ModelConfig {
        ModelConfig {
            d_h: 8,
            feature_dim: 4,
            heads: 2,
            ffn_mult: 2,
            recent: 6,
            lifecycle_threshold: 20,
            recent_layers: 1,
            mid_layers: 1,
            decoder_layers: 1,
            idx_heads: 1,
            idx_dim: 4,
            top_k: 4,
            m_c: 3,
            phi: Phi::EluPlusOne,
            delta: Delta::None,
            fusion,
            tied: true,
            streams: Streams::ALL,
            code_features: true,
            shared_lifecycle_budget: 8,
        }
    }

    pub(crate) fn tiny_data() -> (Dataset, Codebook, ItemTable) {
        let cfg = SynthConfig {
            n_users: 6,
            n_items: 100,
            horizon: 64,
            min_len: 40,
            n_topics: 4,
            favorites: 3,
            catalog_dim: 4,
            plant: PlantSpec {
                long_range_rate: 0.3,
                mid_range_rate: 0.1,
                recent: 6,
                lifecycle_threshold: 20,
            },
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 2).unwrap();
        let vectors: Vec<Vec<f64>> = ds.catalog.iter().map(|c| c.vector.clone()).collect();
        let cb = fit_residual_kmeans(&vectors, &[4, 4], 1).unwrap();
        let pairs: Vec<(u64, Vec<f64>)> = ds.catalog.iter().map(|c| (c.vid, c.vector.clone())).collect();
        let sids = SidIndex::build(&pairs, &cb).unwrap();
        let vids: Vec<u64> = ds.catalog.iter().map(|c| c.vid).collect();
        let items = ItemTable::from_sids(&vids, &sids).unwrap();
        (ds, cb, items)
    }

    #[test]
    fn every_mode_encodes_and_decodes() {
        let (ds, cb, items) = tiny_data();
        for f in Fusion::ALL {
            let mut store = ParamStore::new(1);
            let m = GemsModel::new(&mut store, tiny_cfg(f), Vocab::of(&ds), &cb.sizes()).unwrap();
            m.init_codes(&mut store, &cb).unwrap();
            let u = &ds.users[0];
            let (hist, target) = u.split_target();
            let mem = CompressedMemory {
                user_id: u.user_id,
                vectors: Tensor::full(&[3, 8], 0.1),
                source_length: 5,
                version: 1,
                empty: false,
            };
            let mut t = Tape::with_params(&store);
            let e = m.encode(&mut t, hist, target.ts, &items, Some(&mem), MidPath::Dense, true).unwrap();
            let o = m.decoder.forward(&mut t, &[vec![0, 1]], &e.memory).unwrap();
            assert_eq!(o.logits.len(), 2);
            assert!(t.value(o.logits[1]).is_finite(), "mode {f}");
            assert_eq!(e.s_mid.len(), if f == Fusion::A { 0 } else { 1 });
        }
    }

    #[test]
    fn code_table_norms_do_not_grow_with_width() {
        let (ds, cb, _) = tiny_data();
        let mut store = ParamStore::new(1);
        let m = GemsModel::new(&mut store, tiny_cfg(Fusion::D), Vocab::of(&ds), &cb.sizes()).unwrap();
        m.init_codes(&mut store, &cb).unwrap();
        let c = store.get(m.decoder.codes[0]);
        let sq_norm = c.data().iter().map(|x| x * x).sum::<f64>() / c.rows() as f64;
        assert!((sq_norm - cb.width().min(c.cols()) as f64).abs() < 1e-9);
    }

    #[test]
    fn recent_only_equals_residual_paths() {
        // disabling streams is the same as handing the decoder empty memories
        let (ds, cb, items) = tiny_data();
        let mut store = ParamStore::new(3);
        let mut cfg = tiny_cfg(Fusion::D);
        let full = GemsModel::new(&mut store, cfg.clone(), Vocab::of(&ds), &cb.sizes()).unwrap();
        cfg.streams = Streams::ABLATIONS[3];
        let mut store2 = ParamStore::new(3);
        let only = GemsModel::new(&mut store2, cfg, Vocab::of(&ds), &cb.sizes()).unwrap();
        assert_eq!(store.num_scalars(), store2.num_scalars());
        let u = &ds.users[1];
        let (hist, target) = u.split_target();
        let run = |m: &GemsModel, s: &ParamStore, strip: bool| {
            let mut t = Tape::with_params(s);
            let mut e = m.encode(&mut t, hist, target.ts, &items, None, MidPath::Dense, false).unwrap();
            if strip {
                if let DecoderMemory::PerStream(ms) = &mut e.memory {
                    ms[1] = None;
                    ms[2] = None;
                }
            }
            let o = m.decoder.forward(&mut t, &[vec![1, 2]], &e.memory).unwrap();
            t.value(o.logits[1]).clone()
        };
        assert_eq!(run(&only, &store2, false), run(&full, &store, true));
    }

    #[test]
    fn rejects_invalid_configs() {
        let (ds, cb, _) = tiny_data();
        let mut store = ParamStore::new(1);
        let bad = ModelConfig {
            idx_heads: 2,
            ..tiny_cfg(Fusion::D)
        };
        assert!(matches!(
            GemsModel::new(&mut store, bad, Vocab::of(&ds), &cb.sizes()),
            Err(GemsError::Config { .. })
        ));
        let bad = ModelConfig {
            streams: Streams {
                recent: false,
                mid: false,
                lifecycle: false,
            },
            ..tiny_cfg(Fusion::D)
        };
        assert!(GemsModel::new(&mut store, bad, Vocab::of(&ds), &cb.sizes()).is_err());
    }
}
