//! First-order (Taylor) intermediate between S6 and COFFEE: exponentials
//! replaced by `I + AΔ`, time-invariant per-feature `B⁽ⁱ⁾`, `C⁽ⁱ⁾`, and a
//! token gate `Δ(k) = σ(W_D u(k))`.

use crate::error::{CoffeeError, Result};
use crate::numerics::{dot, init_normal, sigmoid, Matrix, RngState};

use super::state::{LayerTrace, StateTrajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedParams {
    /// `D × n`.
    pub lambda: Matrix,
    /// Per-feature input vectors `B⁽ⁱ⁾`, `D × n`.
    pub b: Matrix,
    /// Per-feature output rows `C⁽ⁱ⁾`, `D × n`.
    pub c: Matrix,
    /// Token gate projection, `D × D`.
    pub w_d: Matrix,
}

impl LinearizedParams {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            lambda: Matrix::zeros(d, n),
            b: Matrix::zeros(d, n),
            c: Matrix::zeros(d, n),
            w_d: Matrix::zeros(d, d),
        }
    }

    pub fn init(rng: &mut RngState, d: usize, n: usize) -> Self {
        let b = init_normal(rng, d, n);
        let c = init_normal(rng, d, n);
        let w_d = init_normal(rng, d, d);
        Self { lambda: Matrix::zeros(d, n), b, c, w_d }
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.lambda.rows()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.lambda.cols()
    }
}

/// `x_next = (I + A diag(δ)) x_prev + diag(δ) B⁽ⁱ⁾ u_i`.
pub fn linearized_step(
    params: &LinearizedParams,
    feature: usize,
    x_prev: &[f64],
    u_i: f64,
    delta: &[f64],
) -> Result<Vec<f64>> {
    let n = params.n();
    if feature >= params.d() || x_prev.len() != n || delta.len() != n {
        return Err(CoffeeError::Shape("linearized_step argument shapes".into()));
    }
    let lambda = params.lambda.row(feature);
    let b = params.b.row(feature);
    Ok((0..n).map(|j| (1.0 + lambda[j] * delta[j]) * x_prev[j] + delta[j] * b[j] * u_i).collect())
}

pub fn linearized_forward(params: &LinearizedParams, embedded: &Matrix) -> Result<LayerTrace> {
    let (d, n) = (params.d(), params.n());
    if embedded.cols() != d {
        return Err(CoffeeError::Shape(format!(
            "input has {} features, layer expects {d}",
            embedded.cols()
        )));
    }
    let len = embedded.rows();
    let mut states = StateTrajectory::zeros(len, d, n);
    let mut outputs = Matrix::zeros(len, d);
    let mut prev = vec![0.0; d * n];
    let mut z = vec![0.0; d];
    for k in 0..len {
        let u = embedded.row(k);
        params.w_d.matvec_into(u, &mut z);
        let cur = states.step_mut(k);
        for i in 0..d {
            let delta = sigmoid(z[i]);
            for j in 0..n {
                let idx = i * n + j;
                cur[idx] = (1.0 + params.lambda[(i, j)] * delta) * prev[idx]
                    + delta * params.b[(i, j)] * u[i];
            }
            outputs[(k, i)] = dot(params.c.row(i), &cur[i * n..(i + 1) * n]);
        }
        prev.copy_from_slice(cur);
    }
    Ok(LayerTrace { outputs, states })
}
