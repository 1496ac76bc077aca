//! Tape-free numeric kernels shared by the autodiff ops and the inference paths.

use std::cmp::Ordering;

/// `c[m×n] = beta·c + op(a)·op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` means `a` is stored as `k×m` (row-major), likewise `b_t` means `b` is
/// stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place numerically stabilized softmax over `row`, restricted to
/// positions where `allowed` holds. Disallowed entries become 0; if nothing
/// is allowed the whole row is 0.
pub fn softmax_in_place(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `log Σ exp(row[j])` over allowed positions; `-inf` when none are allowed.
pub fn log_sum_exp(row: &[f64], allowed: impl Fn(usize) -> bool) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &x)| (x - max).exp())
        .sum();
    max + s.ln()
}

/// Indices of the `k` largest entries, best first. Ties resolve to the lower
/// index. Entries rejected by `valid` are never returned, so the result may
/// hold fewer than `k` indices.
pub fn top_k_indices(values: &[f64], k: usize, valid: Option<&[bool]>) -> Vec<usize> {
    let allowed = |j: usize| valid.is_none_or(|m| m[j]);
    let mut pool: Vec<f64> = match valid {
        Some(m) => values.iter().zip(m).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect(),
        None => values.to_vec(),
    };
    if k == 0 || pool.is_empty() {
        return Vec::new();
    }
    let k = k.min(pool.len());
    // the k-th largest value splits the row; ties at it go to the lowest indices
    let (_, kth, _) = pool.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let kth = *kth;
    let above = pool[..k - 1].iter().filter(|v| v.total_cmp(&kth).is_gt()).count();
    let mut at = k - above;
    let mut idx = Vec::with_capacity(k);
    for (j, v) in values.iter().enumerate() {
        if !allowed(j) {
            continue;
        }
        match v.total_cmp(&kth) {
            Ordering::Greater => idx.push(j),
            Ordering::Equal if at > 0 => {
                at -= 1;
                idx.push(j);
            }
            _ => {}
        }
    }
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Dot product with four independent accumulators so the adds pipeline.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_ties_prefer_lower_index() {
        let v = [1.0, 3.0, 3.0, 2.0, 3.0];
        assert_eq!(top_k_indices(&v, 2, None), vec![1, 2]);
        assert_eq!(top_k_indices(&v, 4, None), vec![1, 2, 4, 3]);
    }

    #[test]
    fn top_k_respects_validity() {
        let v = [5.0, 1.0, 4.0];
        let mask = [false, true, true];
        assert_eq!(top_k_indices(&v, 5, Some(&mask)), vec![2, 1]);
    }

    proptest::proptest! {
        #[test]
        fn top_k_matches_a_full_sort(
            v in proptest::collection::vec(-4i32..4, 0..60),
            k in 0usize..70,
            mask_bits in proptest::collection::vec(proptest::bool::ANY, 60),
        ) {
            let values: Vec<f64> = v.iter().map(|&x| x as f64 * 0.5).collect();
            let mask = &mask_bits[..values.len()];
            let mut order: Vec<usize> = (0..values.len()).filter(|&j| mask[j]).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            order.truncate(k);
            proptest::prop_assert_eq!(top_k_indices(&values, k, Some(mask)), order);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        // aᵀ·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        // a·bᵀ
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut r = [1.0, 2.0];
        softmax_in_place(&mut r, |_| false);
        assert_eq!(r, [0.0, 0.0]);
    }
}
