//! Beam-search generation of semantic IDs and the retrieval metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Plant, Split};
use crate::decoder::MassStats;
use crate::encoder::features::ItemTable;
use crate::encoder::lifecycle::MemoryStore;
use crate::encoder::midterm::MidPath;
use crate::error::{GemsError, Result};
use crate::model::GemsModel;
use crate::numerics::{ParamStore, Tape};
use crate::quantizer::{SemanticId, SidIndex};
use crate::training::{examples, Example};

/// A partial code sequence and its cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub codes: Vec<usize>,
    pub logp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Final beams, best first.
    pub ranked: Vec<Beam>,
    /// `levels[l]` holds the prefixes of length `l + 1` kept at level `l`.
    pub levels: Vec<Vec<Vec<usize>>>,
}

/// Best-first order: higher log-prob, then the lexicographically smaller code.
fn beam_order(a: &Beam, b: &Beam) -> std::cmp::Ordering {
    b.logp.total_cmp(&a.logp).then_with(|| a.codes.cmp(&b.codes))
}

/// The width actually used: `width` capped at the number of full codes.
pub fn effective_width(width: usize, sizes: &[usize]) -> usize {
    let total = sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s)).unwrap_or(usize::MAX);
    if width > total {
        log::warn!("beam width {width} exceeds the {total} possible codes; clamped");
        total
    } else {
        width
    }
}

/// Keeps the global top `width` children of `beams` given each beam's
/// level log-probabilities (`logprobs[i]` belongs to `beams[i]`).
pub fn expand(beams: &[Beam], logprobs: &[Vec<f64>], width: usize) -> Vec<Beam> {
    let mut children: Vec<Beam> = beams
        .iter()
        .zip(logprobs)
        .flat_map(|(b, lp)| {
            lp.iter().enumerate().map(move |(c, &p)| {
                let mut codes = b.codes.clone();
                codes.push(c);
                Beam { codes, logp: b.logp + p }
            })
        })
        .collect();
    if children.len() > width {
        children.select_nth_unstable_by(width - 1, beam_order);
        children.truncate(width);
    }
    children.sort_by(beam_order);
    children
}

/// Beam search over `sizes.len()` levels. `score` maps a batch of equal
/// length prefixes to one row of log-probabilities per prefix.
pub fn beam_search_with<F>(sizes: &[usize], width: usize, mut score: F) -> Result<BeamOutput>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    if width == 0 {
        return Err(GemsError::config("eval.beam_width", "must be at least 1"));
    }
    let width = effective_width(width, sizes);
    let mut beams = vec![Beam { codes: Vec::new(), logp: 0.0 }];
    let mut levels = Vec::with_capacity(sizes.len());
    for (l, &size) in sizes.iter().enumerate() {
        let prefixes: Vec<Vec<usize>> = beams.iter().map(|b| b.codes.clone()).collect();
        let lp = score(&prefixes)?;
        if lp.len() != beams.len() || lp.iter().any(|r| r.len() != size) {
            return Err(GemsError::Contract(format!("level-{l} scores do not match the beams")));
        }
        beams = expand(&beams, &lp, width);
        levels.push(beams.iter().map(|b| b.codes.clone()).collect());
    }
    Ok(BeamOutput { ranked: beams, levels })
}

/// Log-softmax of each row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Generates codes for one user with the trained model.
pub fn generate(
    store: &ParamStore,
    model: &GemsModel,
    items: &ItemTable,
    ex: &Example<'_>,
    memories: &MemoryStore,
    path: MidPath,
    width: usize,
) -> Result<(BeamOutput, MassStats)> {
    let mut t = Tape::with_params(store).no_grad();
    let enc = model.encode(&mut t, ex.history, ex.now, items, memories.get(ex.user_id), path, false)?;
    let mut mass = MassStats::default();
    let out = beam_search_with(model.sizes(), width, |prefixes| {
        let l = prefixes[0].len();
        let out = model.decoder.forward(&mut t, prefixes, &enc.memory)?;
        if l == 0 {
            mass.merge(&out.mass);
        }
        let lg = t.value(out.logits[l]);
        Ok((0..lg.rows()).map(|r| log_softmax(lg.row(r))).collect())
    })?;
    Ok((out, mass))
}

/// Rank (1-based) of the first SID in `ranked[..k]` whose items include `target`.
pub fn target_rank(ranked: &[SemanticId], index: &SidIndex, target: u64, k: usize) -> Option<usize> {
    ranked.iter().take(k).position(|s| index.items(s).contains(&target)).map(|p| p + 1)
}

/// Hit iff the target item is among the items of the top `k` SIDs.
pub fn recall_at_k(ranked: &[SemanticId], index: &SidIndex, target: u64, k: usize) -> f64 {
    if target_rank(ranked, index, target, k).is_some() {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a target at `rank ≤ k`, else 0.
pub fn ndcg_at_k(ranked: &[SemanticId], index: &SidIndex, target: u64, k: usize) -> f64 {
    target_rank(ranked, index, target, k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2())
}

/// Hit iff the target's length-`l` prefix survived in the level-`l` beam set
/// (`l` is 1-based).
pub fn hrecall(levels: &[Vec<Vec<usize>>], target: &[usize], l: usize) -> f64 {
    if l == 0 || l > levels.len() || l > target.len() {
        return 0.0;
    }
    if levels[l - 1].iter().any(|p| p[..] == target[..l]) {
        1.0
    } else {
        0.0
    }
}

/// Metrics of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEval {
    pub user_id: u64,
    pub plant: Plant,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub hrecall: Vec<f64>,
}

pub fn score_user(out: &BeamOutput, index: &SidIndex, target_vid: u64, target_sid: &[usize], ks: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ranked: Vec<SemanticId> = out.ranked.iter().map(|b| SemanticId(b.codes.clone())).collect();
    let recall = ks.iter().map(|&k| recall_at_k(&ranked, index, target_vid, k)).collect();
    let ndcg = ks.iter().map(|&k| ndcg_at_k(&ranked, index, target_vid, k)).collect();
    let hr = (1..=out.levels.len()).map(|l| hrecall(&out.levels, target_sid, l)).collect();
    (recall, ndcg, hr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Hrecall at each level, measured with the beam width `max(ks)`.
    pub hrecall: Vec<f64>,
    /// Level-3 (deepest) Hrecall per plant: recent, mid, long.
    pub hrecall_by_plant: BTreeMap<String, f64>,
    /// Mean per-stream allocation (recent, mid, lifecycle).
    pub mass: [f64; 3],
    pub users: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_users(label: &str, ks: &[usize], users: &[UserEval], mass: &MassStats, config_hash: &str, seed: u64) -> Self {
        let n = users.len().max(1) as f64;
        let mean = |f: &dyn Fn(&UserEval) -> &Vec<f64>, len: usize| -> Vec<f64> {
            (0..len).map(|i| users.iter().map(|u| f(u)[i]).sum::<f64>() / n).collect()
        };
        let depth = users.first().map_or(0, |u| u.hrecall.len());
        let mut by_plant = BTreeMap::new();
        for p in [Plant::Recent, Plant::Mid, Plant::Long] {
            let sel: Vec<&UserEval> = users.iter().filter(|u| u.plant == p).collect();
            if !sel.is_empty() && depth > 0 {
                let v = sel.iter().map(|u| u.hrecall[depth - 1]).sum::<f64>() / sel.len() as f64;
                by_plant.insert(p.as_str().to_string(), v);
            }
        }
        EvalReport {
            label: label.to_string(),
            ks: ks.to_vec(),
            recall: mean(&|u| &u.recall, ks.len()),
            ndcg: mean(&|u| &u.ndcg, ks.len()),
            hrecall: mean(&|u| &u.hrecall, depth),
            hrecall_by_plant: by_plant,
            mass: mass.mean(),
            users: users.len(),
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    /// Deepest-level Hrecall.
    pub fn hrecall_last(&self) -> f64 {
        self.hrecall.last().copied().unwrap_or(0.0)
    }

    pub fn prefix_dominance(&self) -> bool {
        self.hrecall.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Aligned text table, one row per report.
pub fn table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut head = vec!["setting".to_string()];
    for k in &first.ks {
        head.push(format!("R@{k}"));
    }
    for k in &first.ks {
        head.push(format!("N@{k}"));
    }
    let kmax = first.ks.iter().max().copied().unwrap_or(0);
    for l in 1..=first.hrecall.len() {
        head.push(format!("H@L{l}@{kmax}"));
    }
    head.extend(["mass(r/m/l)".to_string()]);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(r.recall.iter().chain(&r.ndcg).chain(&r.hrecall).map(|v| format!("{v:.4}")));
            row.push(format!("{:.2}/{:.2}/{:.2}", r.mass[0], r.mass[1], r.mass[2]));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&head).chain(&rows) {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// Evaluates every test user; per-user work is split over `workers`
/// threads and reduced in user-id order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    store: &ParamStore,
    model: &GemsModel,
    items: &ItemTable,
    index: &SidIndex,
    ds: &Dataset,
    memories: &MemoryStore,
    path: MidPath,
    ks: &[usize],
    workers: usize,
) -> Result<(Vec<UserEval>, MassStats)> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(GemsError::config("eval.ks", "need at least one positive K"));
    }
    let width = *ks.iter().max().expect("non-empty");
    let exs = examples(ds, Split::Test, items);
    if exs.is_empty() {
        return Err(GemsError::Data("no test users with a coded target".into()));
    }
    let run = |chunk: &[Example<'_>]| -> Result<(Vec<UserEval>, MassStats)> {
        let mut mass = MassStats::default();
        let mut out = Vec::with_capacity(chunk.len());
        for ex in chunk {
            let (beams, m) = generate(store, model, items, ex, memories, path, width)?;
            mass.merge(&m);
            let (recall, ndcg, hrecall) = score_user(&beams, index, ex.vid, &ex.sid, ks);
            out.push(UserEval {
                user_id: ex.user_id,
                plant: ds.meta_of(ex.user_id).plant,
                recall,
                ndcg,
                hrecall,
            });
        }
        Ok((out, mass))
    };
    let workers = workers.clamp(1, exs.len());
    let parts: Vec<Result<(Vec<UserEval>, MassStats)>> = if workers == 1 {
        vec![run(&exs)]
    } else {
        let size = exs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let hs: Vec<_> = exs.chunks(size).map(|c| s.spawn(move || run(c))).collect();
            hs.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        })
    };
    let mut users = Vec::with_capacity(exs.len());
    let mut mass = MassStats::default();
    for p in parts {
        let (u, m) = p?;
        users.extend(u);
        mass.merge(&m);
    }
    users.sort_by_key(|u| u.user_id);
    Ok((users, mass))
}

#[cfg(test)]
mod tests;
