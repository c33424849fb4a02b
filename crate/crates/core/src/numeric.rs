//! Small numeric helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{MoeError, Result};

/// `log(sum(exp(v)))` with max-subtraction. Returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = v.iter().map(|&a| (a - max).exp()).sum();
    max + s.ln()
}

/// In-place softmax of log weights; leaves a simplex point.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for a in v.iter_mut() {
        *a = (*a - max).exp();
        s += *a;
    }
    for a in v.iter_mut() {
        *a /= s;
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

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in v.iter().enumerate().skip(1) {
        if a > v[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| MoeError::RankDeficient {
            context: context.to_string(),
        })?;
    let x = chol.solve(b);
    if x.iter().all(|v| v.is_finite()) && well_conditioned(a) {
        Ok(x)
    } else {
        Err(MoeError::RankDeficient {
            context: context.to_string(),
        })
    }
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if !well_conditioned(a) {
        return Err(MoeError::RankDeficient {
            context: context.to_string(),
        });
    }
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| MoeError::RankDeficient {
            context: context.to_string(),
        })
}

// Cholesky succeeds on some numerically singular Gram matrices; reject those
// whose diagonal pivots collapse relative to the largest diagonal entry.
fn well_conditioned(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return false;
    }
    match a.clone().cholesky() {
        Some(c) => {
            let l = c.l();
            (0..n).all(|i| l[(i, i)] * l[(i, i)] > 1e-13 * max_diag)
        }
        None => false,
    }
}

/// 2-norm condition number via singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1e4, 1e4];
        assert!((log_sum_exp(&v) - (1e4 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn softplus_matches_naive_in_range() {
        for &x in &[-30.0, -1.0, 0.0, 2.5, 30.0] {
            let naive = (1.0 + f64::exp(x)).ln();
            assert!((softplus(x) - naive).abs() < 1e-12);
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
    }

    #[test]
    fn hand_inverse_of_two_by_two_gram() {
        // rows (1,0) and (1,1)
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let inv = spd_inverse(&h, "test").unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 2.0]);
        assert!((inv - expected).abs().max() < 1e-12);
    }

    #[test]
    fn singular_gram_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            spd_inverse(&h, "gram"),
            Err(MoeError::RankDeficient { .. })
        ));
    }
}
