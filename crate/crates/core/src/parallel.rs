//! Parallel-in-time evaluation: associative scan for diagonal linear
//! recurrences and a Newton fixed-point solver for COFFEE trajectories.
//!
//! The scan uses a fixed pairwise tree. Level 0 combines elements
//! `(2i, 2i+1)`, the half-length sequence is scanned recursively, and the
//! even positions are filled in on the way down. The tree depends only on
//! `L`, so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{CoffeeError, Result};
use crate::numerics::{sigmoid, Matrix};
use crate::ssm::{coffee_output, coffee_step, CoffeeParams, LayerTrace, StateTrajectory};

/// The affine map `x ↦ a x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub const IDENTITY: ScanElement = ScanElement { a: 1.0, b: 0.0 };

    /// `self ∘ earlier`: apply `earlier` first.
    #[inline]
    pub fn after(self, earlier: ScanElement) -> ScanElement {
        ScanElement { a: self.a * earlier.a, b: self.a * earlier.b + self.b }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        self.a * x + self.b
    }
}

/// Scalar operation count of a scan, for work-complexity checks.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScanOps {
    pub compositions: u64,
    pub applications: u64,
}

impl ScanOps {
    pub fn total(&self) -> u64 {
        self.compositions + self.applications
    }
}

fn inclusive_scan(elems: &[ScanElement], ops: &mut ScanOps) -> Vec<ScanElement> {
    let len = elems.len();
    if len <= 1 {
        return elems.to_vec();
    }
    let pairs: Vec<ScanElement> = elems.chunks_exact(2).map(|p| p[1].after(p[0])).collect();
    ops.compositions += pairs.len() as u64;
    let sub = inclusive_scan(&pairs, ops);
    let mut out = Vec::with_capacity(len);
    out.push(elems[0]);
    for k in 1..len {
        if k % 2 == 1 {
            out.push(sub[k / 2]);
        } else {
            out.push(elems[k].after(sub[k / 2 - 1]));
            ops.compositions += 1;
        }
    }
    out
}

/// `x(k) = a(k) x(k-1) + b(k)` for `k = 0..L` with `x(-1) = x0`, evaluated
/// by prefix composition.
pub fn diag_linear_scan(a: &[f64], b: &[f64], x0: f64) -> Result<Vec<f64>> {
    diag_linear_scan_counted(a, b, x0).map(|(x, _)| x)
}

pub fn diag_linear_scan_counted(a: &[f64], b: &[f64], x0: f64) -> Result<(Vec<f64>, ScanOps)> {
    if a.len() != b.len() {
        return Err(CoffeeError::Shape(format!(
            "scan coefficients differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let elems: Vec<ScanElement> = a.iter().zip(b).map(|(&a, &b)| ScanElement { a, b }).collect();
    let mut ops = ScanOps::default();
    let prefix = inclusive_scan(&elems, &mut ops);
    ops.applications = prefix.len() as u64;
    Ok((prefix.into_iter().map(|e| e.apply(x0)).collect(), ops))
}

/// Plain left-to-right evaluation, the reference for the scan.
pub fn sequential_linear_recurrence(a: &[f64], b: &[f64], x0: f64) -> Vec<f64> {
    let mut x = x0;
    a.iter()
        .zip(b)
        .map(|(&a, &b)| {
            x = a * x + b;
            x
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointReport {
    /// Newton sweeps performed (the largest count over all lanes).
    pub iterations: usize,
    /// Largest step-equation violation `|x(k) - f(x(k-1), u(k))|`.
    pub final_residual: f64,
    pub converged: bool,
}

/// Damping halvings tried before a full step is accepted regardless.
const MAX_HALVINGS: usize = 6;

struct Lane<'a> {
    lambda: f64,
    w: f64,
    u: &'a [f64],
}

impl Lane<'_> {
    #[inline]
    fn f(&self, x: f64, u: f64) -> f64 {
        let s = sigmoid(self.w * x);
        (1.0 + self.lambda * s) * x + s * u
    }

    #[inline]
    fn jac(&self, x: f64, u: f64) -> f64 {
        let s = sigmoid(self.w * x);
        1.0 + self.lambda * s + s * (1.0 - s) * self.w * (self.lambda * x + u)
    }

    fn residual(&self, xs: &[f64]) -> f64 {
        let mut prev = 0.0;
        let mut worst: f64 = 0.0;
        for (&x, &u) in xs.iter().zip(self.u) {
            let r = (x - self.f(prev, u)).abs();
            worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
            prev = x;
        }
        worst
    }

    /// Newton target: the linearization of every step equation around `xs`
    /// is a diagonal linear recurrence, solved with the scan.
    fn newton(&self, xs: &[f64]) -> Vec<f64> {
        let len = xs.len();
        let mut a = Vec::with_capacity(len);
        let mut b = Vec::with_capacity(len);
        let mut prev = 0.0;
        for (&x, &u) in xs.iter().zip(self.u) {
            let j = self.jac(prev, u);
            a.push(j);
            b.push(self.f(prev, u) - j * prev);
            prev = x;
        }
        diag_linear_scan(&a, &b, 0.0).expect("equal lengths")
    }

    fn solve(&self, tol: f64, max_iter: usize) -> (Vec<f64>, FixedPointReport) {
        let mut xs = vec![0.0; self.u.len()];
        let mut res = self.residual(&xs);
        let mut iterations = 0;
        while iterations < max_iter {
            let target = self.newton(&xs);
            iterations += 1;
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> =
                    xs.iter().zip(&target).map(|(x, t)| x + alpha * (t - x)).collect();
                let r = self.residual(&trial);
                if r < res {
                    accepted = Some((trial, r));
                    break;
                }
                alpha *= 0.5;
            }
            // A full step always fixes one more leading state exactly, so it
            // is taken when no damped step lowers the residual.
            let (next, r) = accepted.unwrap_or_else(|| {
                let r = self.residual(&target);
                (target, r)
            });
            xs = next;
            res = r;
            if res < tol {
                break;
            }
        }
        (xs, FixedPointReport { iterations, final_residual: res, converged: res < tol })
    }
}

/// Solve the whole-trajectory equations `x(k) = f(x(k-1), u(k))` by Newton
/// sweeps from the all-zero iterate. Every `(feature, component)` lane is an
/// independent scalar problem because the step Jacobian is diagonal.
pub fn coffee_fixed_point_eval(
    params: &CoffeeParams,
    embedded: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<(StateTrajectory, FixedPointReport)> {
    if !(tol > 0.0) {
        return Err(CoffeeError::InvalidArgument("tolerance must be positive".into()));
    }
    params.validate()?;
    let (d, n) = (params.d(), params.n());
    if embedded.cols() != d {
        return Err(CoffeeError::Shape(format!(
            "input has {} features, layer expects {d}",
            embedded.cols()
        )));
    }
    let len = embedded.rows();
    let columns: Vec<Vec<f64>> = (0..d).map(|i| (0..len).map(|k| embedded[(k, i)]).collect()).collect();
    let results: Vec<(Vec<f64>, FixedPointReport)> = (0..d * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            let lane = Lane { lambda: params.lambda[(i, j)], w: params.w_d[(i, j)], u: &columns[i] };
            lane.solve(tol, max_iter)
        })
        .collect();

    let mut states = StateTrajectory::zeros(len, d, n);
    let mut report = FixedPointReport { iterations: 0, final_residual: 0.0, converged: true };
    for (idx, (xs, r)) in results.into_iter().enumerate() {
        let (i, j) = (idx / n, idx % n);
        for (k, x) in xs.into_iter().enumerate() {
            states.set(k, i, j, x);
        }
        report.iterations = report.iterations.max(r.iterations);
        report.final_residual = report.final_residual.max(r.final_residual);
        report.converged &= r.converged;
    }
    Ok((states, report))
}

/// Outputs `y(k)` for a state trajectory produced by the solver.
pub fn outputs_from_states(params: &CoffeeParams, states: &StateTrajectory) -> LayerTrace {
    let d = params.d();
    let outputs = Matrix::from_fn(states.len(), d, |k, i| coffee_output(params, i, states.feature(k, i)));
    LayerTrace { outputs, states: states.clone() }
}

/// Central-difference estimate of the full `n × n` Jacobian of one COFFEE
/// step with respect to the previous state.
pub fn jacobian_fd(
    params: &CoffeeParams,
    feature: usize,
    x_prev: &[f64],
    u_i: f64,
    h: f64,
) -> Result<Matrix> {
    let n = params.n();
    let mut jac = Matrix::zeros(n, n);
    let mut probe = x_prev.to_vec();
    for c in 0..n {
        probe[c] = x_prev[c] + h;
        let (plus, _) = coffee_step(params, feature, &probe, u_i)?;
        probe[c] = x_prev[c] - h;
        let (minus, _) = coffee_step(params, feature, &probe, u_i)?;
        probe[c] = x_prev[c];
        for r in 0..n {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Largest off-diagonal magnitude of the finite-difference step Jacobian.
pub fn jacobian_diag_check(
    params: &CoffeeParams,
    feature: usize,
    x_prev: &[f64],
    u_i: f64,
) -> Result<f64> {
    let jac = jacobian_fd(params, feature, x_prev, u_i, 1e-6)?;
    let n = jac.rows();
    let mut worst: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            if r != c {
                worst = worst.max(jac[(r, c)].abs());
            }
        }
    }
    Ok(worst)
}
