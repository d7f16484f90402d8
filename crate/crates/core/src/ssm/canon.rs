//! Redundancy elimination by change of basis.
//!
//! With a pivot embedding `v` whose entries are all nonzero and input
//! vectors `B⁽ⁱ⁾` without zero entries, the input scaling `u_i ↦ u_i / v_i`
//! and the state scaling `T_i = diag(B⁽ⁱ⁾ v_i)` turn the model into one with
//! `B⁽ⁱ⁾ ≡ 1` and the pivot embedding equal to `1`. The gate and output
//! vectors are multiplied by the same diagonal so that `w ⊙ x` and `C x`
//! are unchanged along every trajectory.

use crate::error::{CoffeeError, Result};
use crate::numerics::Matrix;
use crate::pipeline::EmbeddingTable;

use super::coffee::{forward_with_input_gain, CoffeeParams};
use super::state::LayerTrace;

/// COFFEE with an explicit per-feature input vector `B⁽ⁱ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitInputCoffee {
    pub params: CoffeeParams,
    /// `D × n`.
    pub b: Matrix,
}

impl ExplicitInputCoffee {
    pub fn forward(&self, embedded: &Matrix) -> Result<LayerTrace> {
        if self.b.shape() != self.params.lambda.shape() {
            return Err(CoffeeError::Shape("input vectors must be D x n".into()));
        }
        forward_with_input_gain(&self.params, Some(&self.b), embedded)
    }
}

pub fn canonicalize(
    model: &ExplicitInputCoffee,
    embedding: &EmbeddingTable,
    pivot: usize,
) -> Result<(CoffeeParams, EmbeddingTable)> {
    let (d, n) = (model.params.d(), model.params.n());
    if model.b.shape() != (d, n) {
        return Err(CoffeeError::Shape("input vectors must be D x n".into()));
    }
    if embedding.table.cols() != d {
        return Err(CoffeeError::Shape("embedding width differs from D".into()));
    }
    if pivot >= embedding.table.rows() {
        return Err(CoffeeError::InvalidArgument(format!("pivot row {pivot} out of range")));
    }
    let v = embedding.table.row(pivot).to_vec();
    if let Some(i) = v.iter().position(|&x| x == 0.0) {
        return Err(CoffeeError::InvalidArgument(format!(
            "pivot embedding has a zero entry at feature {i}"
        )));
    }
    if let Some(idx) = model.b.as_slice().iter().position(|&x| x == 0.0) {
        return Err(CoffeeError::InvalidArgument(format!(
            "input vector B has a zero entry at feature {}, component {}",
            idx / n,
            idx % n
        )));
    }

    let mut table =
        Matrix::from_fn(embedding.table.rows(), d, |r, i| embedding.table[(r, i)] / v[i]);
    table.row_mut(pivot).fill(1.0);

    let mut params = model.params.clone();
    for i in 0..d {
        for j in 0..n {
            let s = model.b[(i, j)] * v[i];
            params.c[(i, j)] *= s;
            params.w_d[(i, j)] *= s;
            if let Some(wg) = params.w_gamma.as_mut() {
                wg[(i, j)] *= s;
            }
        }
    }
    Ok((params, EmbeddingTable { table, frozen_row: Some(pivot) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::ssm::coffee::coffee_forward;

    fn embed(table: &Matrix, seq: &[usize]) -> Matrix {
        Matrix::from_fn(seq.len(), table.cols(), |k, i| table[(seq[k], i)])
    }

    #[test]
    fn scalar_absorption() {
        let mut params = CoffeeParams::zeros(1, 1, false);
        params.c.fill(3.0);
        params.w_d.fill(0.7);
        params.lambda.fill(-0.4);
        let model = ExplicitInputCoffee { params, b: Matrix::filled(1, 1, 2.0) };
        let emb = EmbeddingTable {
            table: Matrix::from_rows(&[vec![1.0], vec![-0.5], vec![2.5]]).unwrap(),
            frozen_row: None,
        };
        let (canon, new_emb) = canonicalize(&model, &emb, 0).unwrap();
        assert_eq!(canon.c[(0, 0)], 6.0);
        assert_eq!(new_emb.table.row(0), &[1.0]);

        let mut rng = RngState::new(2);
        for _ in 0..10 {
            let seq: Vec<usize> = (0..12).map(|_| rng.below(3)).collect();
            let a = model.forward(&embed(&emb.table, &seq)).unwrap();
            let b = coffee_forward(&canon, &embed(&new_emb.table, &seq)).unwrap();
            assert!(a.outputs.max_abs_diff(&b.outputs) < 1e-12);
        }
    }

    #[test]
    fn zero_entries_rejected() {
        let mut model = ExplicitInputCoffee {
            params: CoffeeParams::zeros(2, 2, false),
            b: Matrix::filled(2, 2, 1.0),
        };
        let emb = EmbeddingTable { table: Matrix::filled(2, 2, 1.0), frozen_row: None };
        model.b[(1, 0)] = 0.0;
        assert!(canonicalize(&model, &emb, 0).is_err());
        model.b[(1, 0)] = 1.0;
        let mut bad = emb.clone();
        bad.table[(0, 1)] = 0.0;
        assert!(canonicalize(&model, &bad, 0).is_err());
        assert!(canonicalize(&model, &bad, 1).is_ok());
    }
}
