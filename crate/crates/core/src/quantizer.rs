//! Residual K-means tokenization of item vectors into hierarchical semantic IDs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GemsError, Result};
use crate::numerics::checkpoint::{self, TensorFile, CODEBOOK_MAGIC};
use crate::numerics::{Precision, Tensor};

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;

/// Level sizes used for the production-scale configuration.
pub const PAPER_CODEBOOK_SIZES: [usize; 3] = [8192, 8192, 8192];
/// Level sizes used by the desk profile.
pub const DESK_CODEBOOK_SIZES: [usize; 3] = [64, 64, 64];

/// Per-level centroid tables, each `M_l × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    levels: Vec<Tensor>,
}

/// One code per codebook level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId(pub Vec<usize>);

impl SemanticId {
    pub fn codes(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn prefix(&self, len: usize) -> &[usize] {
        &self.0[..len.min(self.0.len())]
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl std::str::FromStr for SemanticId {
    type Err = GemsError;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|c| {
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| GemsError::Data(format!("bad semantic id `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(SemanticId)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `centroids`; ties resolve to the lowest index.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl Codebook {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        let width = levels
            .first()
            .ok_or_else(|| GemsError::config("codebook", "needs at least one level"))?
            .cols();
        for l in &levels {
            if l.cols() != width || l.rows() == 0 {
                return Err(GemsError::config("codebook", "levels must share a positive width"));
            }
            if !l.is_finite() {
                return Err(GemsError::Data("codebook has non-finite centroids".into()));
            }
        }
        Ok(Codebook { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Tensor::rows).collect()
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    /// Greedy nearest-centroid coding of successive residuals.
    pub fn quantize(&self, item: &[f64]) -> Result<SemanticId> {
        if item.len() != self.width() {
            return Err(GemsError::Dimension {
                op: "quantize",
                lhs: vec![item.len()],
                rhs: vec![self.width()],
            });
        }
        let mut residual = item.to_vec();
        let mut codes = Vec::with_capacity(self.depth());
        for level in &self.levels {
            let (c, _) = nearest(&residual, level);
            residual.iter_mut().zip(level.row(c)).for_each(|(r, x)| *r -= x);
            codes.push(c);
        }
        Ok(SemanticId(codes))
    }

    /// Sum of the selected centroids (the first `levels` of them).
    pub fn reconstruct_prefix(&self, sid: &SemanticId, levels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        for (l, &c) in sid.0.iter().enumerate().take(levels) {
            out.iter_mut().zip(self.levels[l].row(c)).for_each(|(o, x)| *o += x);
        }
        out
    }

    pub fn reconstruct(&self, sid: &SemanticId) -> Vec<f64> {
        self.reconstruct_prefix(sid, self.depth())
    }

    /// Mean squared residual norm after each level under greedy coding.
    pub fn residual_mse(&self, items: &[Vec<f64>]) -> Vec<f64> {
        let mut totals = vec![0.0; self.depth()];
        for item in items {
            let mut residual = item.clone();
            for (l, level) in self.levels.iter().enumerate() {
                let (c, d) = nearest(&residual, level);
                residual.iter_mut().zip(level.row(c)).for_each(|(r, x)| *r -= x);
                totals[l] += d;
            }
        }
        let n = items.len().max(1) as f64;
        totals.into_iter().map(|t| t / n).collect()
    }

    pub fn save(&self, path: &Path, manifest: &str) -> Result<()> {
        let file = TensorFile {
            precision: Precision::F64,
            manifest: manifest.to_string(),
            entries: self
                .levels
                .iter()
                .enumerate()
                .map(|(l, t)| (format!("level.{l}"), t.clone()))
                .collect(),
        };
        checkpoint::write_file(path, CODEBOOK_MAGIC, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = checkpoint::read_file(path, CODEBOOK_MAGIC)?;
        Codebook::new(file.entries.into_iter().map(|(_, t)| t).collect())
    }
}

/// Plain Lloyd iterations with k-means++ seeding.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.len();
    let dim = points[0].len();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass is zero: take the first point not yet used
            (0..n).find(|&i| !centroids.iter().any(|c| c == &points[i])).unwrap_or(0)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
        let c = centroids.last().expect("pushed");
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c));
        }
    }
    let mut cents = Tensor::from_rows(&centroids).expect("rectangular");

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &cents);
            assign[i] = c;
            dist[i] = d;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            sums[assign[i] * dim..(assign[i] + 1) * dim]
                .iter_mut()
                .zip(p)
                .for_each(|(s, x)| *s += x);
        }
        let mut next = Tensor::zeros(&[k, dim]);
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                next.row_mut(c)
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                    .for_each(|(o, s)| *o = s * inv);
            }
        }
        // empty clusters: reseed at the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                next.row_mut(c).copy_from_slice(&points[far]);
                dist[far] = 0.0;
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), cents.row(c)).sqrt())
            .fold(0.0, f64::max);
        cents = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    cents
}

/// Fits `sizes.len()` levels; level `l` clusters the residuals left after
/// greedy coding with levels `< l`.
pub fn fit_residual_kmeans(items: &[Vec<f64>], sizes: &[usize], seed: u64) -> Result<Codebook> {
    if items.is_empty() {
        return Err(GemsError::Data("cannot fit a codebook on no items".into()));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(GemsError::config("codebook.sizes", "levels must be non-empty and positive"));
    }
    let width = items[0].len();
    if width == 0 || items.iter().any(|x| x.len() != width) {
        return Err(GemsError::Data("items must share a positive width".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > items.len()) {
        return Err(GemsError::config(
            "codebook.sizes",
            format!("level size {s} exceeds item count {}", items.len()),
        ));
    }
    let mut residuals = items.to_vec();
    let mut levels = Vec::with_capacity(sizes.len());
    for (l, &k) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(l as u64));
        let cents = kmeans(&residuals, k, &mut rng);
        for r in residuals.iter_mut() {
            let (c, _) = nearest(r, &cents);
            r.iter_mut().zip(cents.row(c)).for_each(|(x, y)| *x -= y);
        }
        levels.push(cents);
    }
    Codebook::new(levels)
}

/// Semantic ID → items, keeping colliding items in insertion order.
#[derive(Debug, Clone, Default)]
pub struct SidIndex {
    by_sid: BTreeMap<SemanticId, Vec<u64>>,
    by_item: HashMap<u64, SemanticId>,
    order: Vec<u64>,
}

impl SidIndex {
    pub fn build(catalog: &[(u64, Vec<f64>)], cb: &Codebook) -> Result<Self> {
        if catalog.is_empty() {
            return Err(GemsError::Data("empty catalog".into()));
        }
        let mut idx = SidIndex::default();
        for (vid, v) in catalog {
            idx.insert(*vid, cb.quantize(v)?);
        }
        Ok(idx)
    }

    pub fn insert(&mut self, vid: u64, sid: SemanticId) {
        self.by_sid.entry(sid.clone()).or_default().push(vid);
        self.by_item.insert(vid, sid);
        self.order.push(vid);
    }

    pub fn items(&self, sid: &SemanticId) -> &[u64] {
        self.by_sid.get(sid).map_or(&[], Vec::as_slice)
    }

    pub fn sid(&self, vid: u64) -> Option<&SemanticId> {
        self.by_item.get(&vid)
    }

    pub fn num_items(&self) -> usize {
        self.order.len()
    }

    pub fn num_sids(&self) -> usize {
        self.by_sid.len()
    }

    /// `(#items − #distinct SIDs) / #items`.
    pub fn collision_rate(&self) -> f64 {
        if self.order.is_empty() {
            return 0.0;
        }
        (self.order.len() - self.by_sid.len()) as f64 / self.order.len() as f64
    }

    /// Text form: one `vid \t c1,c2,...` line per item, after `#` header lines.
    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(header.as_bytes());
        for vid in &self.order {
            writeln!(out, "{vid}\t{}", self.by_item[vid])?;
        }
        checkpoint::write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut idx = SidIndex::default();
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (vid, sid) = line.split_once('\t').ok_or_else(|| GemsError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                offset: 0,
                message: "expected `vid<TAB>codes`".into(),
            })?;
            let vid = vid.parse().map_err(|_| GemsError::Data(format!("bad vid `{vid}`")))?;
            idx.insert(vid, sid.parse()?);
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]
    }

    #[test]
    fn one_level_on_square_corners_is_exact() {
        let cb = fit_residual_kmeans(&square(), &[4], 7).unwrap();
        let mut rows = cb.level(0).to_rows();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = square();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, want);
        assert_eq!(cb.residual_mse(&square()), vec![0.0]);
    }

    #[test]
    fn two_levels_do_not_increase_mse() {
        let cb = fit_residual_kmeans(&square(), &[2, 2], 7).unwrap();
        let mse = cb.residual_mse(&square());
        assert!(mse[1] <= mse[0], "{mse:?}");
    }

    #[test]
    fn errors_on_empty_and_oversized() {
        assert!(fit_residual_kmeans(&[], &[2], 0).is_err());
        assert!(fit_residual_kmeans(&square(), &[5], 0).is_err());
    }

    #[test]
    fn quantize_centroid_returns_its_index() {
        let cb = Codebook::new(vec![
            Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![-3.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.0]]).unwrap(),
        ])
        .unwrap();
        assert_eq!(cb.quantize(&[5.0, 5.0]).unwrap(), SemanticId(vec![1, 0]));
        assert!(cb.quantize(&[1.0]).is_err());
    }

    #[test]
    fn quantize_ties_pick_lowest_index() {
        let cb = Codebook::new(vec![Tensor::from_rows(&[vec![-1.0], vec![1.0]]).unwrap()]).unwrap();
        assert_eq!(cb.quantize(&[0.0]).unwrap(), SemanticId(vec![0]));
    }

    #[test]
    fn identical_items_collide() {
        let cb = fit_residual_kmeans(&square(), &[2, 2], 1).unwrap();
        let catalog = vec![(10, vec![0.3, 0.3]), (11, vec![0.3, 0.3]), (12, vec![1.0, 1.0])];
        let idx = SidIndex::build(&catalog, &cb).unwrap();
        let sid = idx.sid(10).unwrap().clone();
        assert_eq!(idx.items(&sid), &[10, 11]);
        let expect = (3 - idx.num_sids()) as f64 / 3.0;
        assert_eq!(idx.collision_rate(), expect);
    }

    fn random_items(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn greedy_first_level_matches_exhaustive_oracle() {
        let items = random_items(60, 3, 4);
        let cb = fit_residual_kmeans(&items, &[4, 4], 4).unwrap();
        for x in &items {
            let sid = cb.quantize(x).unwrap();
            // exhaustive scan of every level-1 centroid
            let mut best = (usize::MAX, f64::INFINITY);
            for a in 0..4 {
                let d = sq_dist(x, cb.level(0).row(a));
                if d < best.1 {
                    best = (a, d);
                }
            }
            assert_eq!(sid.0[0], best.0);
        }
    }

    #[test]
    fn full_reconstruction_beats_first_level_on_average() {
        let items = random_items(60, 3, 5);
        let cb = fit_residual_kmeans(&items, &[4, 4], 5).unwrap();
        let (mut full, mut first) = (0.0, 0.0);
        for x in &items {
            let sid = cb.quantize(x).unwrap();
            full += sq_dist(x, &cb.reconstruct(&sid));
            first += sq_dist(x, &cb.reconstruct_prefix(&sid, 1));
        }
        assert!(full <= first, "{full} > {first}");
    }

    #[test]
    fn fitting_is_deterministic() {
        let items = random_items(80, 4, 8);
        let a = fit_residual_kmeans(&items, &[6, 5, 4], 21).unwrap();
        let b = fit_residual_kmeans(&items, &[6, 5, 4], 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn codebook_file_round_trips() {
        let cb = fit_residual_kmeans(&random_items(40, 3, 2), &[4, 4], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.bin");
        cb.save(&path, "# test\n").unwrap();
        assert_eq!(Codebook::load(&path).unwrap(), cb);
        let idx = SidIndex::build(&[(1, vec![0.0; 3]), (2, vec![0.5; 3])], &cb).unwrap();
        let ip = dir.path().join("sids.tsv");
        idx.save(&ip, "# test\n").unwrap();
        let back = SidIndex::load(&ip).unwrap();
        assert_eq!(back.sid(2), idx.sid(2));
        assert_eq!(back.num_items(), 2);
    }

    #[test]
    fn reference_sizes() {
        assert_eq!(PAPER_CODEBOOK_SIZES, [8192; 3]);
        assert_eq!(DESK_CODEBOOK_SIZES, [64; 3]);
    }

    proptest::proptest! {
        #[test]
        fn residual_mse_is_monotone(seed in 0u64..1000, n in 20usize..60, d in 1usize..5) {
            let items = random_items(n, d, seed);
            let cb = fit_residual_kmeans(&items, &[5, 4, 3], seed).unwrap();
            let mse = cb.residual_mse(&items);
            for w in mse.windows(2) {
                proptest::prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", mse);
            }
        }

        #[test]
        fn requantizing_a_reconstruction_is_idempotent(seed in 0u64..1000) {
            // levels at decreasing scales, so each reconstruction's tail stays
            // inside half the minimum centroid gap of the level above
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels: Vec<Tensor> = [10.0, 1.0, 0.1]
                .iter()
                .map(|&s| Tensor::randn(5, 2, s, &mut rng))
                .collect();
            let cb = Codebook::new(levels).unwrap();
            let gap = |l: usize| {
                let t = cb.level(l);
                let mut g = f64::INFINITY;
                for a in 0..t.rows() {
                    for b in a + 1..t.rows() {
                        g = g.min(sq_dist(t.row(a), t.row(b)).sqrt());
                    }
                }
                g
            };
            for x in random_items(20, 2, seed) {
                let x: Vec<f64> = x.iter().map(|v| v * 20.0).collect();
                let sid = cb.quantize(&x).unwrap();
                let y = cb.reconstruct(&sid);
                let tail_ok = (0..2).all(|l| {
                    let tail: Vec<f64> = (0..2)
                        .map(|k| (l + 1..3).map(|m| cb.level(m).at(sid.0[m], k)).sum())
                        .collect();
                    sq_dist(&tail, &[0.0, 0.0]).sqrt() < gap(l) / 2.0
                });
                proptest::prop_assume!(tail_ok);
                proptest::prop_assert_eq!(cb.quantize(&y).unwrap(), sid);
            }
        }
    }
}
