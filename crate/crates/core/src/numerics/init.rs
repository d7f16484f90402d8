use nalgebra::DMatrix;

use super::{Matrix, RngState};
use crate::error::{CoffeeError, Result};

/// Orthonormal embedding rows: fill a `d × vocab_size` matrix with
/// uniform `[0, 1)` draws, factor it as `QR`, and return `Qᵀ`.
pub fn init_embedding_qr(rng: &mut RngState, vocab_size: usize, d: usize) -> Result<Matrix> {
    if vocab_size == 0 || d == 0 {
        return Err(CoffeeError::InvalidArgument("embedding dimensions must be positive".into()));
    }
    if vocab_size > d {
        return Err(CoffeeError::InvalidArgument(format!(
            "orthonormal embedding needs vocab_size <= D, got {vocab_size} > {d}"
        )));
    }
    // Column-major fill so the draw order follows the D × |M| layout.
    let mut draws = Vec::with_capacity(d * vocab_size);
    for _ in 0..d * vocab_size {
        draws.push(rng.uniform());
    }
    let l = DMatrix::from_column_slice(d, vocab_size, &draws);
    let q = l.qr().q();
    Ok(Matrix::from_fn(vocab_size, d, |r, c| q[(c, r)]))
}

/// i.i.d. standard normal entries.
pub fn init_normal(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn init_uniform(rng: &mut RngState, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(lo, hi))
}

/// HiPPO-style diagonal `[-1, -2, …, -n]`.
pub fn init_hippo_diag(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(CoffeeError::InvalidArgument("state dimension must be at least 1".into()));
    }
    Ok((0..n).map(|i| -((i + 1) as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(m: &Matrix) -> Matrix {
        m.matmul(&m.transpose()).unwrap()
    }

    #[test]
    fn qr_rows_are_orthonormal() {
        for seed in 0..5 {
            let e = init_embedding_qr(&mut RngState::new(seed), 8, 16).unwrap();
            assert_eq!(e.shape(), (8, 16));
            let g = gram(&e);
            for r in 0..8 {
                for c in 0..8 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((g[(r, c)] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn qr_one_dimensional() {
        let e = init_embedding_qr(&mut RngState::new(1), 1, 1).unwrap();
        assert!((e[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qr_rejects_rank_overflow() {
        assert!(init_embedding_qr(&mut RngState::new(1), 9, 8).is_err());
    }

    #[test]
    fn normal_moments() {
        let m = init_normal(&mut RngState::new(2024), 100, 100);
        let n = m.len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert!(m.is_finite());
    }

    #[test]
    fn normal_is_deterministic() {
        let a = init_normal(&mut RngState::new(9), 4, 5);
        let b = init_normal(&mut RngState::new(9), 4, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn hippo_diagonal() {
        assert_eq!(init_hippo_diag(1).unwrap(), vec![-1.0]);
        assert_eq!(init_hippo_diag(4).unwrap(), vec![-1.0, -2.0, -3.0, -4.0]);
        assert!(init_hippo_diag(0).is_err());
    }
}
