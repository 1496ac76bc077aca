use gems_bench::{compressor, level_logits, midterm, qlu_operands, WIDTH};
use gems_core::encoder::lifecycle::qlu_quadratic;
use gems_core::encoder::midterm::MidPath;
use gems_core::eval::{beam_search_with, log_softmax};
use gems_core::numerics::Tape;

#[test]
fn midterm_paths_agree_when_k_covers_the_sequence() {
    let (store, enc, inputs) = midterm(&[48]);
    let dense = enc.infer(&store, &inputs[0], MidPath::Dense).unwrap();
    let sparse = enc.infer(&store, &inputs[0], MidPath::Sparse(48)).unwrap();
    assert_eq!(dense.shape(), &[48, WIDTH]);
    let err = dense.data().iter().zip(sparse.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn compressor_output_has_one_row_per_seed() {
    let (store, qlu, inputs) = compressor(&[100]);
    let mut t = Tape::with_params(&store).no_grad();
    let x = t.constant(inputs[0].clone());
    let y = qlu.attend(&mut t, x).unwrap();
    assert_eq!(t.value(y).shape(), &[16, WIDTH]);
    let (q, k, v) = qlu_operands(32);
    assert_eq!(qlu_quadratic(&q, &k, &v).shape(), &[16, WIDTH]);
}

#[test]
fn beam_over_fixed_rows_starts_with_the_argmax_path() {
    let sizes = [8, 8, 8];
    let rows = level_logits(&sizes);
    let out = beam_search_with(&sizes, 20, |p| Ok(vec![log_softmax(&rows[p[0].len()]); p.len()])).unwrap();
    let argmax: Vec<usize> = rows
        .iter()
        .map(|r| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
        .collect();
    assert_eq!(out.ranked.len(), 20);
    assert_eq!(out.ranked[0].codes, argmax);
}
