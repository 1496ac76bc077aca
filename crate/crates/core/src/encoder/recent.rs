//! Recent stream: embedded events, learned absolute positions, and a stack
//! of bidirectional pre-norm self-attention blocks.

use std::sync::Arc;

use super::features::{FeatureEmbedder, ItemTable};
use super::left_pad_mask;
use crate::data::InteractionEvent;
use crate::error::{GemsError, Result};
use crate::nn::{zeros, EncoderBlock, RmsNorm};
use crate::numerics::{AttnMask, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct RecentConfig {
    pub r: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

#[derive(Debug, Clone)]
pub struct RecentEncoder {
    pub cfg: RecentConfig,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: RmsNorm,
}

impl RecentEncoder {
    pub fn new(store: &mut ParamStore, cfg: RecentConfig) -> Self {
        RecentEncoder::with_prefix(store, "recent", cfg)
    }

    /// Same architecture under another parameter namespace.
    pub fn with_prefix(store: &mut ParamStore, prefix: &str, cfg: RecentConfig) -> Self {
        let d = cfg.d_h;
        RecentEncoder {
            pos: store.normal(&format!("{prefix}.pos"), cfg.r, d, 0.02),
            blocks: (0..cfg.layers)
                .map(|i| EncoderBlock::new(store, &format!("{prefix}.block{i}"), d, cfg.heads, cfg.ffn_hidden))
                .collect(),
            norm: RmsNorm::new(store, &format!("{prefix}.norm"), d),
            cfg,
        }
    }

    /// `R × d_h` rows, oldest first, left-padded with zero rows; the mask
    /// marks real slots.
    pub fn embed_events(
        &self,
        t: &mut Tape<'_>,
        emb: &FeatureEmbedder,
        events: &[InteractionEvent],
        now: i64,
        items: &ItemTable,
    ) -> Result<(Var, Arc<[bool]>)> {
        let (r, d) = (self.cfg.r, self.cfg.d_h);
        if events.len() > r {
            return Err(GemsError::Contract(format!(
                "recent stream holds {} events, more than R = {r}",
                events.len()
            )));
        }
        let mask = left_pad_mask(events.len(), r);
        let h = if events.is_empty() {
            zeros(t, r, d)
        } else if events.len() == r {
            emb.embed(t, events, now, items)?
        } else {
            let real = emb.embed(t, events, now, items)?;
            let pad = zeros(t, r - events.len(), d);
            t.concat_rows(&[pad, real])?
        };
        Ok((h, mask))
    }

    pub fn encode(&self, t: &mut Tape<'_>, h: Var, mask: &Arc<[bool]>) -> Result<Var> {
        let pos = t.param(self.pos);
        let mut x = t.add(h, pos)?;
        let m = AttnMask::Both {
            queries: mask.clone(),
            keys: mask.clone(),
        };
        for b in &self.blocks {
            x = b.forward(t, x, &m)?;
        }
        self.norm.forward(t, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::features::FeatureConfig;
    use crate::numerics::gradcheck::check_params;
    use crate::numerics::Tensor;

    fn setup(r: usize, d: usize) -> (ParamStore, FeatureEmbedder, RecentEncoder, ItemTable) {
        let mut store = ParamStore::new(11);
        let fc = FeatureConfig {
            d_h: d,
            feature_dim: 4,
            n_items: 20,
            n_authors: 6,
            n_tags: 4,
            n_labels: 4,
        };
        let emb = FeatureEmbedder::new(&mut store, "embed", fc, vec![]);
        let enc = RecentEncoder::new(
            &mut store,
            RecentConfig {
                r,
                d_h: d,
                layers: 2,
                heads: 2,
                ffn_hidden: 2 * d,
            },
        );
        let items = ItemTable::from_parts((0..20).collect(), vec![vec![0]; 20]).unwrap();
        (store, emb, enc, items)
    }

    fn events(n: usize) -> Vec<InteractionEvent> {
        (0..n)
            .map(|i| InteractionEvent {
                vid: i as u64 * 3 % 20,
                aid: i as u64 % 6,
                tag: (i % 4) as u32,
                ts: 100 * i as i64,
                pt: 5.0 + i as f32,
                dur: 20.0,
                label: (i % 4) as u8,
            })
            .collect()
    }

    fn run(store: &ParamStore, emb: &FeatureEmbedder, enc: &RecentEncoder, items: &ItemTable, ev: &[InteractionEvent]) -> Tensor {
        let mut t = Tape::with_params(store).no_grad();
        let (h, m) = enc.embed_events(&mut t, emb, ev, 10_000, items).unwrap();
        let y = enc.encode(&mut t, h, &m).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn shape_is_r_by_d_for_any_length() {
        let (store, emb, enc, items) = setup(6, 8);
        for n in [0, 1, 5, 6] {
            let y = run(&store, &emb, &enc, &items, &events(n));
            assert_eq!(y.shape(), &[6, 8]);
            assert!(y.is_finite());
        }
        let mut t = Tape::with_params(&store);
        assert!(enc.embed_events(&mut t, &emb, &events(7), 0, &items).is_err());
    }

    #[test]
    fn all_padding_equals_position_only_path() {
        let (store, emb, enc, items) = setup(6, 8);
        let y = run(&store, &emb, &enc, &items, &[]);
        let mut t = Tape::with_params(&store).no_grad();
        let mask: Arc<[bool]> = vec![false; 6].into();
        let z = zeros(&mut t, 6, 8);
        let p = enc.encode(&mut t, z, &mask).unwrap();
        assert_eq!(&y, t.value(p));
    }

    #[test]
    fn swapping_two_rows_is_not_equivariant() {
        // without positions the blocks would be permutation equivariant
        let (store, _emb, enc, _items) = setup(6, 8);
        let mask = left_pad_mask(6, 6);
        let mut rng = store.rng_for("test");
        let h = Tensor::randn(6, 8, 1.0, &mut rng);
        let mut rows = h.to_rows();
        rows.swap(1, 2);
        let sw = Tensor::from_rows(&rows).unwrap();
        let out = |h: Tensor| {
            let mut t = Tape::with_params(&store).no_grad();
            let h = t.constant(h);
            let y = enc.encode(&mut t, h, &mask).unwrap();
            t.value(y).to_rows()
        };
        let (a, mut b) = (out(h), out(sw));
        b.swap(1, 2);
        let diff: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn real_rows_ignore_padded_slot_contents() {
        let (store, _emb, enc, _items) = setup(6, 8);
        let mask = left_pad_mask(3, 6);
        let mut rng = store.rng_for("test");
        let base = Tensor::randn(6, 8, 1.0, &mut rng);
        let mut noisy = base.clone();
        for i in 0..3 {
            for x in noisy.row_mut(i) {
                *x += 5.0;
            }
        }
        let out = |h: Tensor| {
            let mut t = Tape::with_params(&store).no_grad();
            let h = t.constant(h);
            let y = enc.encode(&mut t, h, &mask).unwrap();
            t.value(y).clone()
        };
        let (a, b) = (out(base), out(noisy));
        for i in 3..6 {
            assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, emb, enc, items) = setup(4, 4);
        let ev = events(4);
        let g = check_params(&store, 1e-5, 6, |t| {
            let (h, m) = enc.embed_events(t, &emb, &ev, 10_000, &items)?;
            let y = enc.encode(t, h, &m)?;
            let w = t.constant(Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect())?);
            let p = t.mul(y, w)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(g.max_rel_err <= 1e-4, "{g:?}");
    }
}
