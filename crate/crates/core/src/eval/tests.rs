use super::*;
use crate::decoder::{Decoder, DecoderConfig, DecoderMemory, Fusion, StreamMemory};
use crate::numerics::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn decoder(seed: u64, sizes: Vec<usize>) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new(seed);
    let d = Decoder::new(
        &mut store,
        DecoderConfig {
            d_h: 8,
            layers: 1,
            heads: 2,
            ffn_hidden: 16,
            sizes,
            fusion: Fusion::D,
            tied: false,
        },
    );
    (store, d)
}

fn memory(t: &mut Tape<'_>, seed: u64) -> DecoderMemory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |rows| Some(StreamMemory::new(t.constant(Tensor::randn(rows, 8, 1.0, &mut rng))));
    DecoderMemory::PerStream([m(4), m(3), m(2)])
}

fn decoder_beams(store: &ParamStore, dec: &Decoder, seed: u64, width: usize) -> BeamOutput {
    let mut t = Tape::with_params(store).no_grad();
    let mem = memory(&mut t, seed);
    let sizes = dec.cfg.sizes.clone();
    beam_search_with(&sizes, width, |p| {
        let l = p[0].len();
        let out = dec.forward(&mut t, p, &mem)?;
        let lg = t.value(out.logits[l]);
        Ok((0..lg.rows()).map(|r| log_softmax(lg.row(r))).collect())
    })
    .unwrap()
}

/// Joint log-prob of every full code, scored with teacher forcing.
fn exhaustive(store: &ParamStore, dec: &Decoder, seed: u64) -> Vec<Beam> {
    let mut t = Tape::with_params(store).no_grad();
    let mem = memory(&mut t, seed);
    let s = &dec.cfg.sizes;
    let mut all = Vec::new();
    for a in 0..s[0] {
        for b in 0..s[1] {
            for c in 0..s[2] {
                let out = dec.forward(&mut t, &[vec![a, b]], &mem).unwrap();
                let logp: f64 = [a, b, c]
                    .iter()
                    .enumerate()
                    .map(|(l, &code)| log_softmax(t.value(out.logits[l]).row(0))[code])
                    .sum();
                all.push(Beam { codes: vec![a, b, c], logp });
            }
        }
    }
    all.sort_by(|x, y| y.logp.total_cmp(&x.logp));
    all
}

#[test]
fn exhaustive_width_matches_brute_force() {
    for seed in 0..5 {
        let (store, dec) = decoder(seed, vec![4, 4, 4]);
        let beams = decoder_beams(&store, &dec, seed + 100, 64);
        let oracle = exhaustive(&store, &dec, seed + 100);
        assert_eq!(beams.ranked.len(), 64);
        let got: std::collections::BTreeSet<_> = beams.ranked.iter().map(|b| b.codes.clone()).collect();
        let want: std::collections::BTreeSet<_> = oracle.iter().map(|b| b.codes.clone()).collect();
        assert_eq!(got, want);
        for (g, w) in beams.ranked.iter().zip(&oracle) {
            assert!((g.logp - w.logp).abs() < 1e-9);
        }
    }
}

#[test]
fn width_one_is_the_greedy_chain() {
    let (store, dec) = decoder(3, vec![4, 5, 6]);
    let beams = decoder_beams(&store, &dec, 9, 1);
    let mut t = Tape::with_params(&store).no_grad();
    let mem = memory(&mut t, 9);
    let mut prefix: Vec<usize> = Vec::new();
    for l in 0..3 {
        let out = dec.forward(&mut t, &[prefix.clone()], &mem).unwrap();
        let row = t.value(out.logits[l]).row(0).to_vec();
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        prefix.push(best);
    }
    assert_eq!(beams.ranked[0].codes, prefix);
}

#[test]
fn width_is_clamped_to_the_code_space() {
    let (store, dec) = decoder(1, vec![2, 2, 3]);
    let beams = decoder_beams(&store, &dec, 1, 1000);
    assert_eq!(beams.ranked.len(), 12);
    assert!(matches!(beam_search_with(&[2], 0, |_| Ok(vec![])), Err(GemsError::Config { .. })));
}

#[test]
fn ties_prefer_smaller_codes() {
    let flat = |p: &[Vec<usize>]| Ok(p.iter().map(|_| vec![(0.25f64).ln(); 4]).collect());
    let out = beam_search_with(&[4, 4], 3, flat).unwrap();
    let codes: Vec<Vec<usize>> = out.ranked.iter().map(|b| b.codes.clone()).collect();
    assert_eq!(codes, vec![vec![0, 0], vec![0, 1], vec![0, 2]]);
}

fn sid(c: &[usize]) -> SemanticId {
    SemanticId(c.to_vec())
}

fn index() -> SidIndex {
    let mut ix = SidIndex::default();
    ix.insert(10, sid(&[0, 0]));
    ix.insert(11, sid(&[0, 1]));
    ix.insert(12, sid(&[1, 0]));
    ix.insert(13, sid(&[1, 0]));
    ix
}

#[test]
fn metric_closed_forms() {
    let ix = index();
    let ranked = vec![sid(&[1, 0]), sid(&[0, 1]), sid(&[0, 0])];
    assert_eq!(recall_at_k(&ranked, &ix, 13, 1), 1.0);
    assert_eq!(ndcg_at_k(&ranked, &ix, 12, 1), 1.0);
    assert_eq!(ndcg_at_k(&ranked, &ix, 10, 3), 0.5);
    assert_eq!(ndcg_at_k(&ranked, &ix, 10, 2), 0.0);
    assert_eq!(recall_at_k(&ranked, &ix, 99, 3), 0.0);
}

#[test]
fn final_beam_hit_implies_hit_at_every_level() {
    let flat = |p: &[Vec<usize>]| Ok(p.iter().map(|q| (0..3).map(|c| -((c + q.len()) as f64)).collect()).collect());
    let out = beam_search_with(&[3, 3, 3], 4, flat).unwrap();
    for b in &out.ranked {
        for l in 1..=3 {
            assert_eq!(hrecall(&out.levels, &b.codes, l), 1.0);
        }
    }
}

/// Brute force over flattened item lists, independent of `target_rank`.
fn oracle_user(ranked: &[SemanticId], ix: &SidIndex, target: u64, k: usize) -> (f64, f64) {
    let mut rank = 0;
    for (i, s) in ranked.iter().enumerate() {
        if i >= k {
            break;
        }
        for &item in ix.items(s) {
            if item == target && rank == 0 {
                rank = i + 1;
            }
        }
    }
    if rank == 0 {
        (0.0, 0.0)
    } else {
        (1.0, 1.0 / (rank as f64 + 1.0).ln() * 2f64.ln())
    }
}

#[test]
fn hundred_user_micro_set_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ix = SidIndex::default();
    for vid in 0..40u64 {
        ix.insert(vid, sid(&[rng.gen_range(0..3), rng.gen_range(0..3)]));
    }
    let all: Vec<SemanticId> = (0..3).flat_map(|a| (0..3).map(move |b| sid(&[a, b]))).collect();
    let (mut r_sum, mut n_sum, mut r_or, mut n_or) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..100 {
        let mut ranked = all.clone();
        use rand::seq::SliceRandom;
        ranked.shuffle(&mut rng);
        let target = rng.gen_range(0..45u64);
        let k = rng.gen_range(1..=9);
        r_sum += recall_at_k(&ranked, &ix, target, k);
        n_sum += ndcg_at_k(&ranked, &ix, target, k);
        let (r, n) = oracle_user(&ranked, &ix, target, k);
        r_or += r;
        n_or += n;
    }
    assert_eq!(r_sum, r_or);
    assert!((n_sum - n_or).abs() < 1e-12);
}

proptest! {
    #[test]
    fn children_never_beat_parents(seed in 0u64..1000, width in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [3usize, 4, 5];
        let out = beam_search_with(&sizes, width, |p| {
            Ok(p.iter().map(|q| log_softmax(&(0..sizes[q.len()]).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>())).collect())
        }).unwrap();
        for b in &out.ranked {
            prop_assert!(b.logp <= 0.0);
        }
        // every kept prefix extends a prefix kept one level up
        for l in 1..3 {
            for p in &out.levels[l] {
                prop_assert!(out.levels[l - 1].iter().any(|q| q[..] == p[..l]));
            }
        }
        prop_assert!(out.ranked.windows(2).all(|w| w[0].logp >= w[1].logp));
    }
}

#[test]
fn report_table_and_dominance() {
    let users = vec![
        UserEval { user_id: 1, plant: Plant::Recent, recall: vec![1.0, 1.0], ndcg: vec![1.0, 1.0], hrecall: vec![1.0, 1.0, 1.0] },
        UserEval { user_id: 2, plant: Plant::Long, recall: vec![0.0, 1.0], ndcg: vec![0.0, 0.5], hrecall: vec![1.0, 0.0, 0.0] },
    ];
    let r = EvalReport::from_users("full", &[1, 3], &users, &MassStats::default(), "abc", 7);
    assert_eq!(r.recall, vec![0.5, 1.0]);
    assert_eq!(r.hrecall, vec![1.0, 0.5, 0.5]);
    assert!(r.prefix_dominance());
    assert_eq!(r.hrecall_by_plant["long"], 0.0);
    let back: EvalReport = serde_json::from_str(&r.to_json_line()).unwrap();
    assert_eq!(back, r);
    let text = table(&[r]);
    assert!(text.lines().next().unwrap().contains("H@L3@3"));
    assert_eq!(text.lines().count(), 2);
}
