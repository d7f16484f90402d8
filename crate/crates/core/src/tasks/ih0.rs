//! The four-symbol induction-head toy problem: alphabet `{1, 2, 3}`,
//! trigger `1`, two one-dimensional integrators with unit state feedback.

use crate::error::{CoffeeError, Result};
use crate::numerics::Matrix;
use crate::pipeline::{distances, predict, softmin_rows, logits_transform};
use crate::ssm::{coffee_forward, CoffeeParams};

pub const IH0_TRIGGER: u32 = 1;
pub const IH0_ALPHABET: [u32; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ih0Sequence {
    pub tokens: [u32; 4],
    pub target: u32,
}

/// `1‖a‖b‖1` and `b‖1‖a‖1` for `a, b ∈ {2, 3}`, each with target `a`.
pub fn enumerate_ih0() -> Vec<Ih0Sequence> {
    let mut out = Vec::with_capacity(8);
    for a in [2, 3] {
        for b in [2, 3] {
            out.push(Ih0Sequence { tokens: [1, a, b, 1], target: a });
            out.push(Ih0Sequence { tokens: [b, 1, a, 1], target: a });
        }
    }
    out
}

/// Rows for symbols 1, 2, 3 at the hand-designed starting point.
pub fn ih0_initial_embedding() -> Matrix {
    Matrix::from_rows(&[vec![6.0, 6.0], vec![-10.0, -1.0], vec![-1.0, -10.0]]).expect("3 x 2")
}

/// Rows for symbols 1, 2, 3 after training from [`ih0_initial_embedding`].
pub fn ih0_learned_embedding() -> Matrix {
    Matrix::from_rows(&[
        vec![5.394, 5.3433],
        vec![-10.2643, -1.5753],
        vec![-1.5395, -10.3404],
    ])
    .expect("3 x 2")
}

/// `λ = 0`, `C = 1`, `w_D = 1` for both features, one state each.
pub fn ih0_model() -> CoffeeParams {
    let mut p = CoffeeParams::zeros(2, 1, false);
    p.c.fill(1.0);
    p.w_d.fill(1.0);
    p
}

pub fn ih0_index(symbol: u32) -> Result<usize> {
    IH0_ALPHABET
        .iter()
        .position(|&s| s == symbol)
        .ok_or(CoffeeError::UnknownSymbol(symbol))
}

pub fn ih0_embed(embedding: &Matrix, tokens: &[u32]) -> Result<Matrix> {
    if embedding.shape() != (3, 2) {
        return Err(CoffeeError::Shape("the toy embedding must be 3 x 2".into()));
    }
    let idx: Vec<usize> = tokens.iter().map(|&s| ih0_index(s)).collect::<Result<_>>()?;
    Ok(Matrix::from_fn(idx.len(), 2, |k, i| embedding[(idx[k], i)]))
}

/// State after every token, starting from the origin.
pub fn ih0_trace(embedding: &Matrix, tokens: &[u32]) -> Result<Vec<[f64; 2]>> {
    let trace = coffee_forward(&ih0_model(), &ih0_embed(embedding, tokens)?)?;
    Ok((0..tokens.len()).map(|k| [trace.outputs[(k, 0)], trace.outputs[(k, 1)]]).collect())
}

/// Symbol chosen by the distance head from the final state.
pub fn ih0_predict(embedding: &Matrix, tokens: &[u32]) -> Result<u32> {
    let states = ih0_trace(embedding, tokens)?;
    let last = states.last().ok_or_else(|| CoffeeError::InvalidArgument("empty sequence".into()))?;
    let y = Matrix::from_vec(1, 2, last.to_vec())?;
    let logits = logits_transform(&softmin_rows(&distances(&y, embedding, false)?));
    Ok(IH0_ALPHABET[predict(logits.row(0))])
}

/// Fraction of the eight sequences classified correctly.
pub fn ih0_accuracy(embedding: &Matrix) -> Result<f64> {
    let all = enumerate_ih0();
    let mut hits = 0;
    for s in &all {
        hits += (ih0_predict(embedding, &s.tokens)? == s.target) as usize;
    }
    Ok(hits as f64 / all.len() as f64)
}
