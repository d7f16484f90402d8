//! Token-gated S6 cell with zero-order-hold discretization.

use crate::error::{CoffeeError, Result};
use crate::numerics::{dot, init_hippo_diag, init_normal, softplus, Matrix, RngState};

use super::state::{GateVector, LayerTrace, StateTrajectory};

/// Below this magnitude the ZOH input coefficient uses its `λ → 0` limit.
pub const ZOH_LIMIT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct S6Params {
    /// Stability exponents, `λ = -exp(μ)`, `D × n`.
    pub mu: Matrix,
    /// `n × D`, shared across features.
    pub w_b: Matrix,
    /// `n × D`, shared across features.
    pub w_c: Matrix,
    /// `D × D` step-size projection.
    pub w_d: Matrix,
}

impl S6Params {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            mu: Matrix::zeros(d, n),
            w_b: Matrix::zeros(n, d),
            w_c: Matrix::zeros(n, d),
            w_d: Matrix::zeros(d, d),
        }
    }

    /// HiPPO diagonal (`λ_j = -(j+1)`, so `μ_j = ln(j+1)`) and standard
    /// normal weight matrices.
    pub fn init(rng: &mut RngState, d: usize, n: usize) -> Result<Self> {
        let hippo = init_hippo_diag(n)?;
        let mu = Matrix::from_fn(d, n, |_, j| (-hippo[j]).ln());
        let w_b = init_normal(rng, n, d);
        let w_c = init_normal(rng, n, d);
        let w_d = init_normal(rng, d, d);
        Ok(Self { mu, w_b, w_c, w_d })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.mu.rows()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.mu.cols()
    }

    #[inline]
    pub fn lambda(&self, feature: usize, j: usize) -> f64 {
        -self.mu[(feature, j)].exp()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d(), self.n());
        if self.w_b.shape() != (n, d) || self.w_c.shape() != (n, d) || self.w_d.shape() != (d, d) {
            return Err(CoffeeError::Shape("S6 parameter arrays have inconsistent shapes".into()));
        }
        if ![&self.mu, &self.w_b, &self.w_c, &self.w_d].iter().all(|m| m.is_finite()) {
            return Err(CoffeeError::NonFinite("S6 parameters".into()));
        }
        Ok(())
    }
}

/// ZOH coefficients `(e^{λΔ}, (e^{λΔ} - 1)/λ)`.
#[inline]
pub fn zoh_coefficients(lambda: f64, delta: f64) -> (f64, f64) {
    let em1 = (lambda * delta).exp_m1();
    let gain = if lambda.abs() < ZOH_LIMIT_EPS { delta } else { em1 / lambda };
    (1.0 + em1, gain)
}

/// `Δ_i = softplus((W_D u)_i)`.
pub fn s6_gate(params: &S6Params, feature: usize, u_vec: &[f64]) -> Result<GateVector> {
    check(params, feature, None, u_vec)?;
    Ok(GateVector::S6 { feature, delta: softplus(dot(params.w_d.row(feature), u_vec)) })
}

pub fn s6_step(
    params: &S6Params,
    feature: usize,
    x_prev: &[f64],
    u_vec: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let GateVector::S6 { delta, .. } = s6_gate(params, feature, u_vec)? else { unreachable!() };
    s6_step_with_delta(params, feature, x_prev, u_vec, delta)
}

/// The S6 update with an externally supplied step size.
pub fn s6_step_with_delta(
    params: &S6Params,
    feature: usize,
    x_prev: &[f64],
    u_vec: &[f64],
    delta: f64,
) -> Result<(Vec<f64>, f64)> {
    check(params, feature, Some(x_prev), u_vec)?;
    if !delta.is_finite() {
        return Err(CoffeeError::NonFinite(format!("S6 step size of feature {feature}")));
    }
    let b = params.w_b.matvec(u_vec);
    let c = params.w_c.matvec(u_vec);
    let u_i = u_vec[feature];
    let x_next: Vec<f64> = (0..params.n())
        .map(|j| {
            let (decay, gain) = zoh_coefficients(params.lambda(feature, j), delta);
            decay * x_prev[j] + gain * b[j] * u_i
        })
        .collect();
    let y = dot(&c, &x_next);
    Ok((x_next, y))
}

pub fn s6_forward(params: &S6Params, embedded: &Matrix) -> Result<LayerTrace> {
    let (d, n) = (params.d(), params.n());
    if embedded.cols() != d {
        return Err(CoffeeError::Shape(format!(
            "input has {} features, layer expects {d}",
            embedded.cols()
        )));
    }
    let len = embedded.rows();
    let lambda: Vec<f64> = params.mu.as_slice().iter().map(|m| -m.exp()).collect();
    let mut states = StateTrajectory::zeros(len, d, n);
    let mut outputs = Matrix::zeros(len, d);
    let mut prev = vec![0.0; d * n];
    let mut z = vec![0.0; d];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    for k in 0..len {
        let u = embedded.row(k);
        params.w_d.matvec_into(u, &mut z);
        params.w_b.matvec_into(u, &mut b);
        params.w_c.matvec_into(u, &mut c);
        let cur = states.step_mut(k);
        for i in 0..d {
            let delta = softplus(z[i]);
            if !delta.is_finite() {
                return Err(CoffeeError::NonFinite(format!("S6 step size at step {k}")));
            }
            for j in 0..n {
                let idx = i * n + j;
                let (decay, gain) = zoh_coefficients(lambda[idx], delta);
                cur[idx] = decay * prev[idx] + gain * b[j] * u[i];
            }
            outputs[(k, i)] = dot(&c, &cur[i * n..(i + 1) * n]);
        }
        prev.copy_from_slice(cur);
    }
    Ok(LayerTrace { outputs, states })
}

fn check(params: &S6Params, feature: usize, x_prev: Option<&[f64]>, u_vec: &[f64]) -> Result<()> {
    if feature >= params.d() {
        return Err(CoffeeError::InvalidArgument(format!("feature {feature} out of range")));
    }
    if u_vec.len() != params.d() {
        return Err(CoffeeError::Shape(format!("input vector must have {} entries", params.d())));
    }
    if x_prev.is_some_and(|x| x.len() != params.n()) {
        return Err(CoffeeError::Shape(format!("state must have {} entries", params.n())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_preserves_state() {
        let p = S6Params::init(&mut RngState::new(3), 3, 4).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0];
        let (next, _) = s6_step_with_delta(&p, 1, &x, &[0.3, -0.7, 1.1], 0.0).unwrap();
        assert_eq!(next, x.to_vec());
    }

    #[test]
    fn zoh_hand_evaluation() {
        // λ = -1, Δ = ln 2, B(k) = W_B u = 1, u_i = 2, x_prev = 4.
        let p = S6Params {
            mu: Matrix::zeros(1, 1),
            w_b: Matrix::filled(1, 1, 0.5),
            w_c: Matrix::filled(1, 1, 1.0),
            w_d: Matrix::zeros(1, 1),
        };
        let (x, y) = s6_step_with_delta(&p, 0, &[4.0], &[2.0], std::f64::consts::LN_2).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14);
        assert!((y - 6.0).abs() < 1e-13);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = S6Params::init(&mut RngState::new(5), 2, 3).unwrap();
        let (_, y) = s6_step(&p, 0, &[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn limit_branch_is_continuous() {
        let (_, g0) = zoh_coefficients(0.0, 0.3);
        let (_, g1) = zoh_coefficients(-1e-9, 0.3);
        assert_eq!(g0, 0.3);
        assert!((g0 - g1).abs() < 1e-9);
    }

    #[test]
    fn non_finite_step_rejected() {
        let p = S6Params::init(&mut RngState::new(5), 2, 3).unwrap();
        assert!(s6_step_with_delta(&p, 0, &[0.0; 3], &[1.0, 1.0], f64::NAN).is_err());
    }

    #[test]
    fn forward_matches_steps() {
        let mut rng = RngState::new(21);
        let p = S6Params::init(&mut rng, 3, 2).unwrap();
        let u = init_normal(&mut rng, 5, 3);
        let trace = s6_forward(&p, &u).unwrap();
        for i in 0..3 {
            let mut x = vec![0.0; 2];
            for k in 0..5 {
                let (next, y) = s6_step(&p, i, &x, u.row(k)).unwrap();
                assert!((y - trace.outputs[(k, i)]).abs() < 1e-12);
                x = next;
            }
        }
    }
}
