//! Dense kernels with a fixed accumulation order. Every reduction runs left
//! to right so repeated evaluation is bit-identical.

use crate::tensor::Real;

/// `a[m×k] · b[k×n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect(); // 4×2
        let want = naive(&a, &b, 3, 4, 2);
        let got = matmul(&a, &b, 3, 4, 2);
        // b as [2×4] transposed storage
        let mut bt = vec![0.0; 8];
        for p in 0..4 {
            for j in 0..2 {
                bt[j * 4 + p] = b[p * 2 + j];
            }
        }
        let got_nt = matmul_nt(&a, &bt, 3, 4, 2);
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for p in 0..4 {
                at[p * 3 + i] = a[i * 4 + p];
            }
        }
        let got_tn = matmul_tn(&at, &b, 4, 3, 2);
        for idx in 0..6 {
            assert!((got[idx] - want[idx]).abs() < 1e-12);
            assert!((got_nt[idx] - want[idx]).abs() < 1e-12);
            assert!((got_tn[idx] - want[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!(sigmoid(-1000.0_f64) >= 0.0);
        assert_eq!(sigmoid(1000.0_f64), 1.0);
    }
}
