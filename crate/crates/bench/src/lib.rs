//! Fixed workloads shared by the benchmarks in `benches/` and their smoke tests.

use gems_core::encoder::lifecycle::{Delta, LifecycleConfig, Phi, QluCompressor};
use gems_core::encoder::midterm::{HeadMix, MidConfig, MidEncoder};
use gems_core::numerics::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WIDTH: usize = 64;

/// A one-block mid-term encoder and random inputs of each length.
pub fn midterm(lengths: &[usize]) -> (ParamStore, MidEncoder, Vec<Tensor>) {
    let cfg = MidConfig {
        budget: lengths.iter().copied().max().unwrap_or(1),
        d_h: WIDTH,
        layers: 1,
        heads: 4,
        ffn_hidden: 2 * WIDTH,
        idx_heads: 1,
        idx_dim: 16,
        head_mix: HeadMix::Softplus,
    };
    let mut store = ParamStore::new(1);
    let enc = MidEncoder::new(&mut store, cfg, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = lengths.iter().map(|&n| Tensor::randn(n, WIDTH, 1.0, &mut rng)).collect();
    (store, enc, inputs)
}

/// A lifecycle compressor and random token sequences of each length.
pub fn compressor(lengths: &[usize]) -> (ParamStore, QluCompressor, Vec<Tensor>) {
    let cfg = LifecycleConfig {
        m_c: 16,
        d_h: WIDTH,
        phi: Phi::EluPlusOne,
        delta: Delta::None,
        heads: 4,
        ffn_hidden: 2 * WIDTH,
    };
    let mut store = ParamStore::new(3);
    let qlu = QluCompressor::new(&mut store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = lengths.iter().map(|&n| Tensor::randn(n, WIDTH, 1.0, &mut rng)).collect();
    (store, qlu, inputs)
}

/// Query seeds, non-negative keys and values for the quadratic reference.
pub fn qlu_operands(n: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = Tensor::randn(16, WIDTH, 1.0, &mut rng);
    let mut k = Tensor::randn(n, WIDTH, 1.0, &mut rng);
    k.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let v = Tensor::randn(n, WIDTH, 1.0, &mut rng);
    (q, k, v)
}

/// One fixed logit row per level, reused for every prefix.
pub fn level_logits(sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    sizes.iter().map(|&m| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}
