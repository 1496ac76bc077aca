use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;
use crate::error::GemsError;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_small_product() {
    let mut t = Tape::new();
    let i = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = t.constant(m(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = t.matmul(i, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = t.constant(m(&[&[1.0, 2.0]]));
    let b = t.constant(m(&[&[3.0], &[4.0]]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(GemsError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::randn(5, 7, 1.0, &mut rng);
    let b = Tensor::randn(7, 3, 1.0, &mut rng);
    let w = Tensor::randn(5, 3, 1.0, &mut rng);
    let r = check(&[a, b, w], 1e-5, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let p = t.mul(c, v[2])?;
        Ok(t.sum_all(p))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn softmax_closed_forms() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[0.0, 0.0, 0.0]]));
    let y = t.softmax_rows(x, &AttnMask::None);
    for &p in t.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(m(&[&[1000.0, 1000.0]]));
    let y = t.softmax_rows(x, &AttnMask::None);
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let x = t.constant(m(&[&[0.0, 3f64.ln()]]));
    let y = t.softmax_rows(x, &AttnMask::None);
    assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn backward_of_sum_and_detach() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let s = t.sum_all(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let d = t.detach(x);
    let p = t.mul(d, x).unwrap();
    let s = t.sum_all(p);
    t.backward(s).unwrap();
    // d/dx Σ c·x with c = detach(x) is c, not 2x.
    assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0, 3.0]);
    assert!(t.grad(d).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(t.backward(x), Err(GemsError::Contract(_))));
}

#[test]
fn kl_of_identical_rows_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Tensor::randn(4, 6, 2.0, &mut rng);
    let mut t = Tape::new();
    let a = t.constant(p.clone());
    let b = t.constant(p);
    let kl = t.kl_rows(a, b, &[1.0; 4], None).unwrap();
    assert!(t.value(kl).item().abs() <= 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_on_random_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let r = rng.gen_range(1..6);
        let c = rng.gen_range(1..9);
        let x = Tensor::randn(r, c, 30.0, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax_rows(v, &AttnMask::None);
        for i in 0..r {
            let row = t.value(y).row(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

/// Every differentiable op, checked over 20 random shapes and seeds.
#[test]
fn every_op_matches_finite_differences() {
    type Case = (&'static str, usize, fn(&mut Tape<'_>, &[Var], usize) -> crate::Result<Var>);
    // Each case takes inputs of shape (r, c) and returns a scalar via a
    // random projection so that every output entry is exercised.
    let cases: Vec<Case> = vec![
        ("add", 2, |t, v, _| t.add(v[0], v[1])),
        ("sub", 2, |t, v, _| t.sub(v[0], v[1])),
        ("mul", 2, |t, v, _| t.mul(v[0], v[1])),
        ("scale", 1, |t, v, _| Ok(t.scale(v[0], -1.7))),
        ("transpose", 1, |t, v, _| {
            let x = t.transpose(v[0]);
            Ok(t.transpose(x))
        }),
        ("matmul_t", 2, |t, v, _| {
            let g = t.matmul_t(v[0], true, v[1], false)?; // c×c
            let h = t.matmul_t(v[0], false, g, true)?; // r×c
            Ok(h)
        }),
        ("add_row", 1, |t, v, _| {
            let r = t.slice_rows(v[0], 0, 1)?;
            t.add_row(v[0], r)
        }),
        ("mul_col", 1, |t, v, _| {
            let c = t.slice_cols(v[0], 0, 1)?;
            t.mul_col(v[0], c)
        }),
        ("concat_slice", 2, |t, v, _| {
            let cat = t.concat_cols(&[v[0], v[1]])?;
            let c = t.value(v[0]).cols();
            let a = t.slice_cols(cat, 1, c)?;
            let rows = t.concat_rows(&[a, v[1]])?;
            let r = t.value(v[0]).rows();
            t.slice_rows(rows, 1, r)
        }),
        ("gather", 1, |t, v, _| {
            let r = t.value(v[0]).rows();
            let idx: Vec<usize> = (0..r + 2).map(|i| (i * 7) % r).collect();
            t.gather_rows(v[0], &idx)
        }),
        ("softmax", 1, |t, v, _| Ok(t.softmax_rows(v[0], &AttnMask::Causal))),
        ("log_softmax", 1, |t, v, _| Ok(t.log_softmax_rows(v[0]))),
        ("rms_norm", 2, |t, v, _| {
            let g = t.slice_rows(v[1], 0, 1)?;
            t.rms_norm(v[0], g)
        }),
        ("silu", 1, |t, v, _| Ok(t.silu(v[0]))),
        ("sigmoid", 1, |t, v, _| Ok(t.sigmoid(v[0]))),
        ("elu_plus_one", 1, |t, v, _| Ok(t.elu_plus_one(v[0]))),
        ("softplus", 1, |t, v, _| Ok(t.softplus(v[0]))),
        ("recip", 1, |t, v, _| {
            let p = t.softplus(v[0]);
            Ok(t.recip(p))
        }),
        ("ffn", 3, |t, v, _| {
            // SiLU-gated feed-forward with square weights taken from inputs.
            let c = t.value(v[0]).cols();
            let w1 = t.matmul_t(v[1], true, v[1], false)?;
            let w3 = t.matmul_t(v[2], true, v[2], false)?;
            let a = t.matmul(v[0], w1)?;
            let a = t.silu(a);
            let b = t.matmul(v[0], w3)?;
            let h = t.mul(a, b)?;
            let s = t.scale(h, 1.0 / c as f64);
            Ok(s)
        }),
        ("cross_entropy", 1, |t, v, _| {
            let (r, c) = (t.value(v[0]).rows(), t.value(v[0]).cols());
            let targets: Vec<usize> = (0..r).map(|i| (3 * i + 1) % c).collect();
            t.cross_entropy(v[0], &targets)
        }),
        ("kl_rows", 2, |t, v, _| {
            let r = t.value(v[0]).rows();
            let c = t.value(v[0]).cols();
            let keys: Arc<[bool]> = (0..c).map(|j| j != 1 || c == 1).collect();
            let w: Vec<f64> = (0..r).map(|i| 1.0 / (i + 1) as f64).collect();
            t.kl_rows(v[0], v[1], &w, Some(keys))
        }),
        ("sq_dist", 2, |t, v, _| t.sq_dist(v[0], v[1])),
        ("sparse_attention", 3, |t, v, _| {
            let r = t.value(v[0]).rows();
            let width = 2.min(r);
            let mut sel = Vec::new();
            for i in 0..r {
                sel.push(i);
                if width == 2 {
                    sel.push(if i + 1 < r { i + 1 } else { usize::MAX });
                }
            }
            t.sparse_attention(v[0], v[1], v[2], Arc::new(sel), width, 0.5)
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, arity, f) in cases {
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let r = rng.gen_range(1..5);
            let c = rng.gen_range(1..5);
            let inputs: Vec<Tensor> = (0..arity).map(|_| Tensor::randn(r, c, 1.0, &mut rng)).collect();
            let out_shape = {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                let o = f(&mut t, &vs, trial).unwrap();
                t.value(o).shape().to_vec()
            };
            let n: usize = out_shape.iter().product();
            let proj = Tensor::new(out_shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let res = check(&inputs, 1e-5, |t, v| {
                let o = f(t, v, trial)?;
                let p = t.constant(proj.clone());
                let w = t.mul(o, p)?;
                Ok(t.sum_all(w))
            })
            .unwrap();
            worst = worst.max(res.max_rel_err);
        }
        assert!(worst <= 1e-4, "{name}: max rel err {worst}");
    }
}

#[test]
fn f32_mode_rounds_every_result() {
    let mut t = Tape::new().with_precision(Precision::F32);
    let x = t.leaf(Tensor::scalar(0.1), true);
    let y = t.scale(x, 3.0);
    assert_eq!(t.value(y).item(), (0.1f32 as f64 * 3.0) as f32 as f64);
}

#[test]
fn identical_seed_gives_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = Tensor::randn(6, 6, 1.0, &mut rng);
        let mut t = Tape::new();
        let v = t.leaf(a, true);
        let s = t.softmax_rows(v, &AttnMask::None);
        let p = t.matmul(s, v).unwrap();
        let l = t.sum_all(p);
        t.backward(l).unwrap();
        t.grad(v).unwrap().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
