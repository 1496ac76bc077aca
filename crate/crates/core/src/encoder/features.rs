//! Per-event feature embedding: seven looked-up features plus the
//! completion ratio, concatenated and projected to `d_h` by a two-layer MLP.

use std::collections::HashMap;

use crate::data::InteractionEvent;
use crate::error::{GemsError, Result};
use crate::nn::Linear;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::quantizer::SidIndex;

pub const TS_BUCKETS: usize = 32;
pub const PT_BUCKETS: usize = 16;
pub const DUR_BUCKETS: usize = 16;
pub const RATIO_BUCKETS: usize = 8;

/// Log2 bucket of the time since the event, in seconds.
pub fn ts_bucket(delta_secs: i64) -> usize {
    let d = delta_secs.max(0) as f64;
    ((1.0 + d).log2().floor() as usize).min(TS_BUCKETS - 1)
}

/// Log2 bucket of a playtime or duration in seconds.
pub fn seconds_bucket(x: f32, buckets: usize) -> usize {
    let x = f64::from(x.max(0.0));
    ((1.0 + x).log2().floor() as usize).min(buckets - 1)
}

/// Quarter-width buckets of `pt / dur`, saturating at 2.
pub fn ratio_bucket(pt: f32, dur: f32) -> usize {
    let r = f64::from(pt) / f64::from(dur.max(1e-6));
    ((r * 4.0).floor().max(0.0) as usize).min(RATIO_BUCKETS - 1)
}

/// Dense item indices and semantic-ID codes for every catalog item.
#[derive(Debug, Clone, Default)]
pub struct ItemTable {
    index: HashMap<u64, usize>,
    vids: Vec<u64>,
    codes: Vec<Vec<usize>>,
}

impl ItemTable {
    pub fn from_parts(vids: Vec<u64>, codes: Vec<Vec<usize>>) -> Result<Self> {
        if vids.len() != codes.len() {
            return Err(GemsError::Data("item table: vids and codes differ in length".into()));
        }
        let index = vids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        Ok(ItemTable { index, vids, codes })
    }

    /// Items in SID-index insertion (catalog) order.
    pub fn from_sids(vids: &[u64], sids: &SidIndex) -> Result<Self> {
        let codes = vids
            .iter()
            .map(|v| {
                sids.sid(*v)
                    .map(|s| s.0.clone())
                    .ok_or_else(|| GemsError::Data(format!("vid {v} has no semantic id")))
            })
            .collect::<Result<Vec<_>>>()?;
        ItemTable::from_parts(vids.to_vec(), codes)
    }

    pub fn len(&self) -> usize {
        self.vids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vids.is_empty()
    }

    pub fn lookup(&self, vid: u64) -> Option<usize> {
        self.index.get(&vid).copied()
    }

    pub fn codes_of(&self, vid: u64) -> Option<&[usize]> {
        self.lookup(vid).map(|i| self.codes[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub d_h: usize,
    pub feature_dim: usize,
    pub n_items: usize,
    pub n_authors: usize,
    pub n_tags: usize,
    pub n_labels: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureEmbedder {
    pub cfg: FeatureConfig,
    /// vid, aid, tag, ts, pt, dur, label, ratio. Row 0 of each categorical
    /// table is the out-of-vocabulary row.
    pub tables: [ParamId; 8],
    pub mlp1: Linear,
    pub mlp2: Linear,
    /// Per-level semantic-ID tables added to the MLP output (may be empty).
    pub codes: Vec<ParamId>,
}

fn oov(id: u64, n: usize) -> usize {
    if (id as usize) < n {
        id as usize + 1
    } else {
        0
    }
}

impl FeatureEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: FeatureConfig, codes: Vec<ParamId>) -> Self {
        let e = cfg.feature_dim;
        let rows = [
            cfg.n_items + 1,
            cfg.n_authors + 1,
            cfg.n_tags + 1,
            TS_BUCKETS,
            PT_BUCKETS,
            DUR_BUCKETS,
            cfg.n_labels + 1,
            RATIO_BUCKETS,
        ];
        let names = ["vid", "aid", "tag", "ts", "pt", "dur", "label", "ratio"];
        let tables = std::array::from_fn(|i| store.normal(&format!("{prefix}.{}", names[i]), rows[i], e, 1.0));
        FeatureEmbedder {
            mlp1: Linear::new(store, &format!("{prefix}.mlp1"), 8 * e, cfg.d_h, true),
            mlp2: Linear::new(store, &format!("{prefix}.mlp2"), cfg.d_h, cfg.d_h, true),
            cfg,
            tables,
            codes,
        }
    }

    /// Table rows used by each feature of each event.
    pub fn indices(&self, events: &[InteractionEvent], now: i64, items: &ItemTable) -> [Vec<usize>; 8] {
        let c = &self.cfg;
        let col = |f: &dyn Fn(&InteractionEvent) -> usize| events.iter().map(f).collect::<Vec<_>>();
        [
            col(&|e| items.lookup(e.vid).map_or(0, |i| (i + 1).min(c.n_items))),
            col(&|e| oov(e.aid, c.n_authors)),
            col(&|e| oov(u64::from(e.tag), c.n_tags)),
            col(&|e| ts_bucket(now - e.ts)),
            col(&|e| seconds_bucket(e.pt, PT_BUCKETS)),
            col(&|e| seconds_bucket(e.dur, DUR_BUCKETS)),
            col(&|e| oov(u64::from(e.label), c.n_labels)),
            col(&|e| ratio_bucket(e.pt, e.dur)),
        ]
    }

    /// `n × d_h` rows, oldest first. `now` is the request time used for the
    /// time-delta feature.
    pub fn embed(&self, t: &mut Tape<'_>, events: &[InteractionEvent], now: i64, items: &ItemTable) -> Result<Var> {
        if events.is_empty() {
            return Err(GemsError::Contract("embed called with no events".into()));
        }
        let idx = self.indices(events, now, items);
        let mut cols = Vec::with_capacity(8);
        for (table, rows) in self.tables.iter().zip(&idx) {
            let tv = t.param(*table);
            cols.push(t.gather_rows(tv, rows)?);
        }
        let f = t.concat_cols(&cols)?;
        let h = self.mlp1.forward(t, f)?;
        let h = t.silu(h);
        let mut h = self.mlp2.forward(t, h)?;
        if !self.codes.is_empty() {
            let known: Vec<Option<&[usize]>> = events.iter().map(|e| items.codes_of(e.vid)).collect();
            for (l, &table) in self.codes.iter().enumerate() {
                let rows: Vec<usize> = known.iter().map(|k| k.map_or(0, |c| c[l])).collect();
                let tv = t.param(table);
                let mut e = t.gather_rows(tv, &rows)?;
                if known.iter().any(Option::is_none) {
                    let m: Vec<f64> = known.iter().map(|k| if k.is_some() { 1.0 } else { 0.0 }).collect();
                    let m = t.constant(Tensor::new(vec![m.len(), 1], m)?);
                    e = t.mul_col(e, m)?;
                }
                h = t.add(h, e)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FeatureConfig {
        FeatureConfig {
            d_h: 8,
            feature_dim: 4,
            n_items: 10,
            n_authors: 5,
            n_tags: 3,
            n_labels: 4,
        }
    }

    fn ev(vid: u64, label: u8) -> InteractionEvent {
        InteractionEvent {
            vid,
            aid: 2,
            tag: 1,
            ts: 1000,
            pt: 20.0,
            dur: 30.0,
            label,
        }
    }

    fn setup() -> (ParamStore, FeatureEmbedder, ItemTable) {
        let mut store = ParamStore::new(3);
        let code = store.normal("code.0", 4, 8, 1.0);
        let emb = FeatureEmbedder::new(&mut store, "embed", cfg(), vec![code]);
        let items = ItemTable::from_parts((0..10).collect(), (0..10).map(|i| vec![i % 4]).collect()).unwrap();
        (store, emb, items)
    }

    #[test]
    fn buckets_are_log_spaced_and_clamped() {
        assert_eq!(ts_bucket(0), 0);
        assert_eq!(ts_bucket(1), 1);
        assert_eq!(ts_bucket(3), 2);
        assert_eq!(ts_bucket(-5), 0);
        assert_eq!(ts_bucket(i64::MAX), TS_BUCKETS - 1);
        assert_eq!(seconds_bucket(1e9, PT_BUCKETS), PT_BUCKETS - 1);
        assert_eq!(ratio_bucket(10.0, 40.0), 1);
        assert_eq!(ratio_bucket(1e6, 1.0), RATIO_BUCKETS - 1);
    }

    #[test]
    fn identical_events_embed_identically_and_label_matters() {
        let (store, emb, items) = setup();
        let mut t = Tape::with_params(&store);
        let h = emb.embed(&mut t, &[ev(3, 1), ev(3, 1), ev(3, 2)], 2000, &items).unwrap();
        let v = t.value(h);
        assert_eq!(v.shape(), &[3, 8]);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(0), v.row(2));
    }

    #[test]
    fn unknown_ids_use_the_oov_row() {
        let (store, emb, items) = setup();
        let idx = emb.indices(&[ev(999, 77)], 2000, &items);
        assert_eq!(idx[0], vec![0]);
        assert_eq!(idx[6], vec![0]);
        let mut t = Tape::with_params(&store);
        let h = emb.embed(&mut t, &[ev(999, 77)], 2000, &items).unwrap();
        assert!(t.value(h).is_finite());
    }
}
