//! Synthetic lifelong histories with planted long-range dependencies.
//!
//! Items belong to topics; an item's catalog vector is its topic centre plus
//! noise, so residual K-means recovers the topic at level 1. Each user has
//! three disjoint favourite sets tied to three timescales:
//!
//! * `A` drives the newest `R` events (ephemeral interest),
//! * `B` drives the mid-term window (seasonal interest),
//! * `C` only appears in events older than the newest `L` (dormant interest).
//!
//! The held-out target is drawn from `A`, `B` or `C` according to the user's
//! plant. A `Long` plant makes the target predictable only from the lifecycle
//! stream, a `Mid` plant only from the mid-term stream.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};

use super::{CatalogItem, Dataset, InteractionEvent, Plant, Split, UserHistory, UserMeta};
use crate::error::{GemsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    /// Fraction of users whose target comes from the dormant set `C`.
    pub long_range_rate: f64,
    /// Fraction of users whose target comes from the mid-term set `B`.
    pub mid_range_rate: f64,
    /// Recent threshold `R` the histories are laid out against.
    pub recent: usize,
    /// Lifecycle threshold `L`.
    pub lifecycle_threshold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Maximum history length (target included).
    pub horizon: usize,
    /// Minimum history length (target included).
    pub min_len: usize,
    pub n_topics: usize,
    pub authors_per_topic: usize,
    pub catalog_dim: usize,
    /// Size of each favourite set.
    pub favorites: usize,
    /// Per-event probability of a uniformly random item.
    pub noise: f64,
    /// Per-event probability of a non-favourite item of the phase topic.
    pub topic_drift: f64,
    pub test_fraction: f64,
    pub plant: PlantSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            n_items: 2000,
            horizon: 2048,
            min_len: 600,
            n_topics: 32,
            authors_per_topic: 8,
            catalog_dim: 16,
            favorites: 8,
            noise: 0.2,
            topic_drift: 0.2,
            test_fraction: 0.1,
            plant: PlantSpec {
                long_range_rate: 0.3,
                mid_range_rate: 0.1,
                recent: 64,
                lifecycle_threshold: 512,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(GemsError::config(format!("data.{f}"), m));
        if self.n_items < 100 {
            return bad("items", "need at least 100 items");
        }
        if self.horizon < 64 {
            return bad("horizon", "must be at least 64");
        }
        if self.min_len < 2 || self.min_len > self.horizon {
            return bad("min_len", "must lie in [2, horizon]");
        }
        if self.n_users == 0 {
            return bad("users", "must be positive");
        }
        if self.n_topics < 3 || self.n_topics > self.n_items {
            return bad("topics", "need at least 3 topics and no more than items");
        }
        if self.favorites == 0 || self.favorites > self.n_items / self.n_topics {
            return bad("favorites", "must be positive and fit inside one topic");
        }
        if self.catalog_dim == 0 || self.authors_per_topic == 0 {
            return bad("catalog_dim", "dimensions must be positive");
        }
        let p = &self.plant;
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(p.long_range_rate) || !rate_ok(p.mid_range_rate) || p.long_range_rate + p.mid_range_rate > 1.0 {
            return bad("long_range_rate", "plant rates must be in [0,1] and sum to at most 1");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction", "must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&(self.noise + self.topic_drift)) {
            return bad("noise", "noise + topic_drift must be in [0, 1]");
        }
        super::segment::check_thresholds(p.recent, p.lifecycle_threshold)
    }
}

struct Item {
    topic: usize,
    aid: u64,
    dur: f32,
}

/// Assigns exactly `round(rate * n)` users to each plant, in shuffled order.
fn assign_plants(n: usize, spec: &PlantSpec, rng: &mut ChaCha8Rng) -> Vec<Plant> {
    let n_long = (spec.long_range_rate * n as f64).round() as usize;
    let n_mid = ((spec.mid_range_rate * n as f64).round() as usize).min(n - n_long.min(n));
    let mut plants: Vec<Plant> = (0..n)
        .map(|i| {
            if i < n_long {
                Plant::Long
            } else if i < n_long + n_mid {
                Plant::Mid
            } else {
                Plant::Recent
            }
        })
        .collect();
    plants.shuffle(rng);
    plants
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centres: Vec<Vec<f64>> = (0..cfg.n_topics)
        .map(|_| (0..cfg.catalog_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let dur_dist = LogNormal::new(3.4, 0.6).expect("valid lognormal");
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut catalog = Vec::with_capacity(cfg.n_items);
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_topics];
    for vid in 0..cfg.n_items {
        let topic = vid % cfg.n_topics;
        let vector = centres[topic]
            .iter()
            .map(|c| c + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let aid = (topic * cfg.authors_per_topic + rng.gen_range(0..cfg.authors_per_topic)) as u64;
        let dur = (dur_dist.sample(&mut rng) as f32).clamp(3.0, 600.0);
        items.push(Item { topic, aid, dur });
        by_topic[topic].push(vid);
        catalog.push(CatalogItem { vid: vid as u64, vector });
    }

    // split first, then plant exact counts inside each split
    let mut order: Vec<usize> = (0..cfg.n_users).collect();
    order.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * cfg.n_users as f64).round() as usize;
    let mut split = vec![Split::Train; cfg.n_users];
    for &u in &order[..n_test] {
        split[u] = Split::Test;
    }
    let test_ids: Vec<usize> = (0..cfg.n_users).filter(|&u| split[u] == Split::Test).collect();
    let train_ids: Vec<usize> = (0..cfg.n_users).filter(|&u| split[u] == Split::Train).collect();
    let mut plant = vec![Plant::Recent; cfg.n_users];
    for ids in [&test_ids, &train_ids] {
        for (&u, p) in ids.iter().zip(assign_plants(ids.len(), &cfg.plant, &mut rng)) {
            plant[u] = p;
        }
    }

    let gap = Exp::new(1.0 / 3600.0).expect("positive rate");
    let (r, l) = (cfg.plant.recent, cfg.plant.lifecycle_threshold);
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut meta = BTreeMap::new();
    for u in 0..cfg.n_users {
        let mut topics: Vec<usize> = (0..cfg.n_topics).collect();
        let (picked, _) = topics.partial_shuffle(&mut rng, 3);
        let phase_topic = [picked[0], picked[1], picked[2]];
        let favs: Vec<Vec<usize>> = phase_topic
            .iter()
            .map(|&t| by_topic[t].choose_multiple(&mut rng, cfg.favorites).copied().collect())
            .collect();

        let t_len = rng.gen_range(cfg.min_len..=cfg.horizon);
        let history_len = t_len - 1;
        let mut ts: i64 = 1_600_000_000 + rng.gen_range(0..86_400 * 30);
        let mut events = Vec::with_capacity(t_len);
        let draw = |phase: usize, rng: &mut ChaCha8Rng, ts: &mut i64| -> InteractionEvent {
            let x: f64 = rng.gen();
            let vid = if x < cfg.noise {
                rng.gen_range(0..cfg.n_items)
            } else if x < cfg.noise + cfg.topic_drift {
                *by_topic[phase_topic[phase]].choose(rng).expect("non-empty topic")
            } else {
                *favs[phase].choose(rng).expect("non-empty favourites")
            };
            let item = &items[vid];
            let liked = item.topic == phase_topic[phase];
            let ratio: f32 = if liked { rng.gen_range(0.4..1.6) } else { rng.gen_range(0.0..0.6) };
            let pt = (ratio * item.dur).min(super::PLAYTIME_CAP * item.dur);
            let label = match (liked, rng.gen_range(0..10)) {
                (true, 0) => 2,
                (true, 1) => 3,
                (true, 2..=5) => 1,
                _ if ratio < 0.3 => 0,
                _ => 1,
            };
            *ts += 1 + gap.sample(rng) as i64;
            InteractionEvent {
                vid: vid as u64,
                aid: item.aid,
                tag: item.topic as u32,
                ts: *ts,
                pt,
                dur: item.dur,
                label,
            }
        };
        for i in 0..history_len {
            let from_newest = history_len - i;
            let phase = if from_newest <= r {
                0
            } else if from_newest <= l {
                1
            } else {
                2
            };
            events.push(draw(phase, &mut rng, &mut ts));
        }
        let target_phase = match plant[u] {
            Plant::Recent => 0,
            Plant::Mid => 1,
            Plant::Long => 2,
        };
        // the target is always a favourite of its phase
        let mut target = draw(target_phase, &mut rng, &mut ts);
        let vid = *favs[target_phase].choose(&mut rng).expect("non-empty favourites");
        target.vid = vid as u64;
        target.aid = items[vid].aid;
        target.tag = items[vid].topic as u32;
        target.dur = items[vid].dur;
        target.pt = target.pt.min(super::PLAYTIME_CAP * target.dur);
        events.push(target);

        let user_id = u as u64 + 1;
        users.push(UserHistory::new(user_id, events)?);
        meta.insert(
            user_id,
            UserMeta {
                split: split[u],
                plant: plant[u],
            },
        );
    }
    Dataset::new(users, catalog, meta)
}

/// Reference predictor for recent-planted users: the most frequent tag in the
/// newest `r` history events (ties to the smaller tag).
pub fn recent_majority_tag(history: &[InteractionEvent], r: usize) -> Option<u32> {
    let start = history.len().saturating_sub(r);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for e in &history[start..] {
        *counts.entry(e.tag).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io;

    fn small(rate: f64) -> SynthConfig {
        SynthConfig {
            n_users: 400,
            n_items: 320,
            horizon: 200,
            min_len: 120,
            n_topics: 16,
            favorites: 4,
            plant: PlantSpec {
                long_range_rate: rate,
                mid_range_rate: 0.0,
                recent: 16,
                lifecycle_threshold: 64,
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rate_zero_targets_follow_recent_majority() {
        let ds = generate_synthetic(&small(0.0), 3).unwrap();
        let hits = ds
            .users
            .iter()
            .filter(|u| {
                let (hist, target) = u.split_target();
                recent_majority_tag(hist, 16) == Some(target.tag)
            })
            .count();
        assert!(hits as f64 >= 0.95 * ds.users.len() as f64, "{hits}");
    }

    #[test]
    fn plant_rate_is_exact_within_test_split() {
        let ds = generate_synthetic(&small(0.3), 5).unwrap();
        let test = ds.split(Split::Test);
        let long = test.iter().filter(|u| ds.meta_of(u.user_id).plant == Plant::Long).count();
        let frac = long as f64 / test.len() as f64;
        assert!((frac - 0.3).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn long_range_targets_only_appear_in_lifecycle() {
        let ds = generate_synthetic(&small(1.0), 9).unwrap();
        for u in &ds.users {
            let (hist, target) = u.split_target();
            let b = crate::data::segment(hist, 16, 64).unwrap();
            assert!(b.lifecycle.iter().any(|e| e.tag == target.tag));
            let recent_hits = b.recent.iter().chain(b.mid_term).filter(|e| e.tag == target.tag).count();
            // only uniform noise can touch the dormant topic in newer segments
            assert!(recent_hits <= 12, "{recent_hits}");
        }
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let a = generate_synthetic(&small(0.3), 11).unwrap();
        let b = generate_synthetic(&small(0.3), 11).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        io::write_events(&mut ba, &a).unwrap();
        io::write_events(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, generate_synthetic(&small(0.3), 12).unwrap());
    }

    #[test]
    fn rejects_tiny_catalogs() {
        let cfg = SynthConfig {
            n_items: 50,
            ..small(0.0)
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(GemsError::Config { .. })));
    }
}
