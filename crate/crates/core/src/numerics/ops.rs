//! Untaped kernels. The tape in [`super::tape`] records calls to these and
//! owns the matching backward rules.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub(crate) fn gemm_into(
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    alpha: f64,
    beta: f64,
    c: &mut [f64],
) {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let n = if trans_b { br } else { bc };
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: strides describe in-bounds row-major views of `a`, `b` and `c`
    // with the extents checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn op_dims(t: &Tensor, trans: bool) -> (usize, usize) {
    let (r, c) = t.dims();
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k) = op_dims(a, trans_a);
    let (k2, n) = op_dims(b, trans_b);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {:?}{} and {:?}{}: inner extents {k} and {k2} differ",
            a.shape(),
            if trans_a { "ᵀ" } else { "" },
            b.shape(),
            if trans_b { "ᵀ" } else { "" },
        )));
    }
    let mut out = Tensor::zeros(m, n);
    gemm_into(a, trans_a, b, trans_b, 1.0, 0.0, out.data_mut());
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what}: non-finite input")))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    check_finite(x, "softmax_rows")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Column means of an `n×d` matrix, `1×d`.
///
/// Each column is summed in ascending value order, so the result is exactly
/// invariant to any permutation of the rows.
pub fn mean_over_rows(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims();
    if n == 0 || x.is_empty() {
        return Err(Error::Domain("mean over zero rows".into()));
    }
    let mut out = vec![0.0; d];
    let mut col = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        for (r, c) in col.iter_mut().enumerate() {
            *c = x.get(r, j);
        }
        col.sort_unstable_by(f64::total_cmp);
        *o = col.iter().sum::<f64>() / n as f64;
    }
    Tensor::matrix(1, d, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims();
        let n = b.cols();
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Tensor::from_rows(&[[2.0, 3.0], [4.0, 5.0]]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let a = Tensor::from_rows(&[[1.0, 2.0]]);
        let c = Tensor::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
        let bt = b.transpose();
        let via_t = gemm(&a, false, &bt, true).unwrap();
        assert!(via_t.max_abs_diff(&got) < 1e-12);
        let at = a.transpose();
        let via_ta = gemm(&at, true, &b, false).unwrap();
        assert!(via_ta.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 1000.0, 1000.0]])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 3f64.ln()]])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax_rows(&Tensor::from_rows(&[[f64::NAN, 0.0]])).is_err());
    }

    #[test]
    fn mean_examples() {
        let m = mean_over_rows(&Tensor::from_rows(&[[1.0, 3.0], [3.0, 5.0]])).unwrap();
        assert_eq!(m.data(), &[2.0, 4.0]);
        let one = Tensor::from_rows(&[[1.5, -2.0, 7.0]]);
        assert_eq!(mean_over_rows(&one).unwrap(), one);
    }

    #[test]
    fn softplus_closed_forms() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(3.0) - 3.048587351573742).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            row in proptest::collection::vec(-500.0f64..500.0, 1..16),
            spread in 0.0f64..2.0,
        ) {
            let scaled: Vec<f64> = row.iter().map(|v| v * spread).collect();
            let s = softmax_rows(&Tensor::row(&scaled)).unwrap();
            let sum: f64 = s.data().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn mean_is_permutation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 1..12),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let x = Tensor::from_rows(&rows);
            let mut perm = rows.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = mean_over_rows(&x).unwrap();
            let b = mean_over_rows(&Tensor::from_rows(&perm)).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
