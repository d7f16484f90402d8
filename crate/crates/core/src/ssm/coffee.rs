//! The state-feedback cell.
//!
//! Each feature `i` runs `n` scalar recursions
//!
//! ```text
//! Δ_j(k)  = σ(w_j · x_j(k-1))
//! x_j(k)  = (1 + λ_j Δ_j(k)) · x_j(k-1) + Δ_j(k) · u_i(k)
//! y_i(k)  = C · x(k)                       (optionally times σ(w_γ · x(k)))
//! ```
//!
//! The gate of component `j` only reads component `j`, so the state Jacobian
//! is diagonal.

use crate::error::{CoffeeError, Result};
use crate::numerics::{dot, init_normal, sigmoid, Matrix, RngState};

use super::state::{GateVector, LayerTrace, StateTrajectory};

pub const LAMBDA_MIN: f64 = -2.0;
pub const LAMBDA_MAX: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CoffeeParams {
    /// Diagonal of `A⁽ⁱ⁾` per feature, `D × n`, kept in `[-2, 0]`.
    pub lambda: Matrix,
    /// Output rows `C⁽ⁱ⁾`, `D × n`.
    pub c: Matrix,
    /// Feedback gate vectors `w_D⁽ⁱ⁾`, `D × n`.
    pub w_d: Matrix,
    /// Output filter vectors `w_γ⁽ⁱ⁾`, `D × n`, when output filtering is on.
    pub w_gamma: Option<Matrix>,
}

impl CoffeeParams {
    pub fn zeros(d: usize, n: usize, output_filter: bool) -> Self {
        Self {
            lambda: Matrix::zeros(d, n),
            c: Matrix::zeros(d, n),
            w_d: Matrix::zeros(d, n),
            w_gamma: output_filter.then(|| Matrix::zeros(d, n)),
        }
    }

    /// λ = 0, C and w_D standard normal. The output filter, when present, is
    /// drawn standard normal too.
    pub fn init(rng: &mut RngState, d: usize, n: usize, output_filter: bool) -> Self {
        let c = init_normal(rng, d, n);
        let w_d = init_normal(rng, d, n);
        let w_gamma = output_filter.then(|| init_normal(rng, d, n));
        Self { lambda: Matrix::zeros(d, n), c, w_d, w_gamma }
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.lambda.rows()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.lambda.cols()
    }

    pub fn has_output_filter(&self) -> bool {
        self.w_gamma.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.lambda.shape();
        let others = [Some(&self.c), Some(&self.w_d), self.w_gamma.as_ref()];
        if others.iter().flatten().any(|m| m.shape() != shape) {
            return Err(CoffeeError::Shape("COFFEE parameter arrays must all be D x n".into()));
        }
        if !self.lambda.is_finite()
            || !self.c.is_finite()
            || !self.w_d.is_finite()
            || self.w_gamma.as_ref().is_some_and(|w| !w.is_finite())
        {
            return Err(CoffeeError::NonFinite("COFFEE parameters".into()));
        }
        Ok(())
    }
}

/// Clamp every λ into `[-2, 0]`.
pub fn stability_project(params: &CoffeeParams) -> CoffeeParams {
    let mut out = params.clone();
    project_lambda(&mut out.lambda);
    out
}

pub fn project_lambda(lambda: &mut Matrix) {
    for v in lambda.as_mut_slice() {
        *v = v.clamp(LAMBDA_MIN, LAMBDA_MAX);
    }
}

/// `Δ = σ(w_D⁽ⁱ⁾ ⊙ x_prev)`.
pub fn coffee_gate(params: &CoffeeParams, feature: usize, x_prev: &[f64]) -> Result<GateVector> {
    check_feature(params, feature, x_prev)?;
    let delta = params.w_d.row(feature).iter().zip(x_prev).map(|(w, x)| sigmoid(w * x)).collect();
    Ok(GateVector::Coffee { feature, delta })
}

/// One step of feature `feature`; returns the next state and the scalar output.
pub fn coffee_step(
    params: &CoffeeParams,
    feature: usize,
    x_prev: &[f64],
    u_i: f64,
) -> Result<(Vec<f64>, f64)> {
    check_feature(params, feature, x_prev)?;
    if !u_i.is_finite() || x_prev.iter().any(|v| !v.is_finite()) {
        return Err(CoffeeError::NonFinite("coffee_step input".into()));
    }
    let lambda = params.lambda.row(feature);
    let w = params.w_d.row(feature);
    let x_next: Vec<f64> = (0..params.n())
        .map(|j| {
            let delta = sigmoid(w[j] * x_prev[j]);
            (1.0 + lambda[j] * delta) * x_prev[j] + delta * u_i
        })
        .collect();
    let y = output(params, feature, &x_next);
    Ok((x_next, y))
}

#[inline]
pub(crate) fn output(params: &CoffeeParams, feature: usize, x: &[f64]) -> f64 {
    let base = dot(params.c.row(feature), x);
    match &params.w_gamma {
        Some(wg) => base * sigmoid(dot(wg.row(feature), x)),
        None => base,
    }
}

/// Run all `D` subsystems over an `L × D` input from the zero state.
pub fn coffee_forward(params: &CoffeeParams, embedded: &Matrix) -> Result<LayerTrace> {
    forward_with_input_gain(params, None, embedded)
}

/// Forward pass with an optional per-feature input vector `B⁽ⁱ⁾` (`D × n`),
/// i.e. the model before the input gain is absorbed into `C`.
pub(crate) fn forward_with_input_gain(
    params: &CoffeeParams,
    input_gain: Option<&Matrix>,
    embedded: &Matrix,
) -> Result<LayerTrace> {
    let (d, n) = (params.d(), params.n());
    if embedded.cols() != d {
        return Err(CoffeeError::Shape(format!(
            "input has {} features, layer expects {d}",
            embedded.cols()
        )));
    }
    if !embedded.is_finite() {
        return Err(CoffeeError::NonFinite("COFFEE input sequence".into()));
    }
    let len = embedded.rows();
    let mut states = StateTrajectory::zeros(len, d, n);
    let mut outputs = Matrix::zeros(len, d);
    let mut prev = vec![0.0; d * n];
    let lambda = params.lambda.as_slice();
    let w = params.w_d.as_slice();
    for k in 0..len {
        let u = embedded.row(k);
        let cur = states.step_mut(k);
        for i in 0..d {
            for j in 0..n {
                let idx = i * n + j;
                let xp = prev[idx];
                let delta = sigmoid(w[idx] * xp);
                let gain = input_gain.map_or(1.0, |b| b[(i, j)]);
                cur[idx] = (1.0 + lambda[idx] * delta) * xp + delta * gain * u[i];
            }
        }
        let out_row = outputs.row_mut(k);
        for (i, y) in out_row.iter_mut().enumerate() {
            *y = output(params, i, &cur[i * n..(i + 1) * n]);
        }
        prev.copy_from_slice(cur);
    }
    if len > 0 && !states.step(len - 1).iter().all(|v| v.is_finite()) {
        return Err(CoffeeError::NonFinite("COFFEE state".into()));
    }
    Ok(LayerTrace { outputs, states })
}

/// Analytic diagonal of `∂x(k)/∂x(k-1)` for feature `feature`:
/// `1 + λΔ + σ'(w x)·w·(λ x + u)`.
pub fn coffee_jacobian_diag(
    params: &CoffeeParams,
    feature: usize,
    x_prev: &[f64],
    u_i: f64,
) -> Vec<f64> {
    let lambda = params.lambda.row(feature);
    let w = params.w_d.row(feature);
    (0..params.n())
        .map(|j| {
            let s = sigmoid(w[j] * x_prev[j]);
            1.0 + lambda[j] * s + s * (1.0 - s) * w[j] * (lambda[j] * x_prev[j] + u_i)
        })
        .collect()
}

fn check_feature(params: &CoffeeParams, feature: usize, x_prev: &[f64]) -> Result<()> {
    if feature >= params.d() {
        return Err(CoffeeError::InvalidArgument(format!(
            "feature {feature} out of range for D = {}",
            params.d()
        )));
    }
    if x_prev.len() != params.n() {
        return Err(CoffeeError::Shape(format!(
            "state has {} components, expected n = {}",
            x_prev.len(),
            params.n()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(lambda: f64, w: f64, c: f64) -> CoffeeParams {
        CoffeeParams {
            lambda: Matrix::filled(1, 1, lambda),
            c: Matrix::filled(1, 1, c),
            w_d: Matrix::filled(1, 1, w),
            w_gamma: None,
        }
    }

    #[test]
    fn gate_at_zero_state_is_half() {
        let mut rng = RngState::new(4);
        let p = CoffeeParams::init(&mut rng, 3, 4, false);
        let GateVector::Coffee { delta, .. } = coffee_gate(&p, 1, &[0.0; 4]).unwrap() else {
            unreachable!()
        };
        assert!(delta.iter().all(|&v| v == 0.5));

        let mut z = p.clone();
        z.w_d.fill(0.0);
        let GateVector::Coffee { delta, .. } = coffee_gate(&z, 2, &[3.0, -1.0, 7.0, 0.2]).unwrap()
        else {
            unreachable!()
        };
        assert!(delta.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_scalar_value() {
        let p = scalar(0.0, 1.0, 1.0);
        let GateVector::Coffee { delta, .. } = coffee_gate(&p, 0, &[2.697]).unwrap() else {
            unreachable!()
        };
        assert!((delta[0] - 0.936_83).abs() < 1e-4, "{}", delta[0]);
    }

    #[test]
    fn integrator_steps_match_figure_trajectory() {
        let p = scalar(0.0, 1.0, 1.0);
        let (x, y) = coffee_step(&p, 0, &[0.0], 5.394).unwrap();
        assert!((x[0] - 2.697).abs() < 1e-12);
        assert!((y - 2.697).abs() < 1e-12);
        let (x, _) = coffee_step(&p, 0, &[2.697], -10.264).unwrap();
        assert!((x[0] + 6.919).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let p = CoffeeParams::init(&mut RngState::new(1), 2, 3, true);
        let (x, y) = coffee_step(&p, 1, &[0.0; 3], 0.0).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn step_rejects_non_finite() {
        let p = scalar(0.0, 1.0, 1.0);
        assert!(coffee_step(&p, 0, &[f64::NAN], 1.0).is_err());
        assert!(coffee_step(&p, 0, &[0.0], f64::INFINITY).is_err());
        assert!(coffee_step(&p, 1, &[0.0], 1.0).is_err());
    }

    #[test]
    fn forward_matches_repeated_steps() {
        let mut rng = RngState::new(8);
        let mut p = CoffeeParams::init(&mut rng, 3, 2, true);
        p.lambda = Matrix::from_fn(3, 2, |_, _| -2.0 * rng.uniform());
        let u = init_normal(&mut rng, 6, 3);
        let trace = coffee_forward(&p, &u).unwrap();
        for i in 0..3 {
            let mut x = vec![0.0; 2];
            for k in 0..6 {
                let (next, y) = coffee_step(&p, i, &x, u[(k, i)]).unwrap();
                assert!((y - trace.outputs[(k, i)]).abs() < 1e-14);
                assert_eq!(next.as_slice(), trace.states.feature(k, i));
                x = next;
            }
        }
    }

    #[test]
    fn empty_sequence() {
        let p = CoffeeParams::zeros(2, 2, false);
        let t = coffee_forward(&p, &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(t.outputs.rows(), 0);
        assert!(t.states.is_empty());
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let mut p = CoffeeParams::zeros(1, 3, false);
        p.lambda = Matrix::from_vec(1, 3, vec![0.3, -2.5, -1.0]).unwrap();
        let q = stability_project(&p);
        assert_eq!(q.lambda.as_slice(), &[0.0, -2.0, -1.0]);
        assert_eq!(stability_project(&q), q);
    }

    #[test]
    fn zero_input_never_grows_state() {
        let mut rng = RngState::new(12);
        for _ in 0..20 {
            let mut p = CoffeeParams::init(&mut rng, 2, 3, false);
            p.lambda = Matrix::from_fn(2, 3, |_, _| -2.0 * rng.uniform());
            let mut x: Vec<f64> = (0..3).map(|_| 5.0 * rng.normal()).collect();
            let mut norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for _ in 0..50 {
                x = coffee_step(&p, 0, &x, 0.0).unwrap().0;
                let next = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(next <= norm + 1e-12);
                norm = next;
            }
        }
    }
}
