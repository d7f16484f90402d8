//! Reverse-mode gradients through the SSM cells, the distance head and the
//! image heads. Every function returns gradients of a loss *sum*; callers
//! normalize.

use crate::error::{CoffeeError, Result};
use crate::numerics::{dot, gelu_prime, sigmoid, softplus, Matrix};
use crate::pipeline::{logit, predict, softmax, softmin_rows, PredictionTarget, LOGIT_CLAMP_EPS};
use crate::ssm::{
    zoh_coefficients, CoffeeParams, LayerTrace, LinearizedParams, S6Params, SsmLayer,
    ZOH_LIMIT_EPS,
};
use crate::tasks::mnist::{mnist_forward, smnist_forward, Affine, MnistModel, SmnistModel};

use super::model::{Gradients, IhModel, Learnable};

/// Distances below this are treated as zero (the gradient is set to zero there).
const DISTANCE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Drop the state dependence of the COFFEE gate from the recurrent
    /// adjoint; the gate's direct dependence on `w_D` is kept.
    pub detach_gate: bool,
}

/// Parameter gradients of one layer (in tensor order) and the gradient with
/// respect to its `L × D` input.
pub struct LayerGrad {
    pub params: Vec<Matrix>,
    pub input: Matrix,
}

pub fn layer_backward(
    layer: &SsmLayer,
    input: &Matrix,
    trace: &LayerTrace,
    d_out: &Matrix,
    opts: BackwardOptions,
) -> LayerGrad {
    match layer {
        SsmLayer::Coffee(p) => coffee_backward(p, input, trace, d_out, opts),
        SsmLayer::S6(p) => s6_backward(p, input, trace, d_out),
        SsmLayer::Linearized(p) => linearized_backward(p, input, trace, d_out),
    }
}

fn coffee_backward(
    p: &CoffeeParams,
    input: &Matrix,
    trace: &LayerTrace,
    d_out: &Matrix,
    opts: BackwardOptions,
) -> LayerGrad {
    let (d, n) = (p.d(), p.n());
    let len = input.rows();
    let mut d_lambda = Matrix::zeros(d, n);
    let mut d_c = Matrix::zeros(d, n);
    let mut d_w = Matrix::zeros(d, n);
    let mut d_wg = p.w_gamma.as_ref().map(|_| Matrix::zeros(d, n));
    let mut d_in = Matrix::zeros(len, d);
    let zeros = vec![0.0; d * n];
    // Adjoint reaching x(k) from step k+1.
    let mut carry = vec![0.0; d * n];
    let mut dy_dx = vec![0.0; n];
    for k in (0..len).rev() {
        let x = trace.states.step(k);
        let xp = if k > 0 { trace.states.step(k - 1) } else { &zeros[..] };
        for i in 0..d {
            let e = d_out[(k, i)];
            let xi = &x[i * n..(i + 1) * n];
            let c = p.c.row(i);
            match (&p.w_gamma, d_wg.as_mut()) {
                (Some(wg), Some(dwg)) => {
                    let a = dot(c, xi);
                    let g = sigmoid(dot(wg.row(i), xi));
                    let gp = g * (1.0 - g);
                    for j in 0..n {
                        dy_dx[j] = c[j] * g + a * gp * wg[(i, j)];
                        d_c[(i, j)] += e * g * xi[j];
                        dwg[(i, j)] += e * a * gp * xi[j];
                    }
                }
                _ => {
                    for j in 0..n {
                        dy_dx[j] = c[j];
                        d_c[(i, j)] += e * xi[j];
                    }
                }
            }
            let u = input[(k, i)];
            let mut du = 0.0;
            for j in 0..n {
                let idx = i * n + j;
                let ax = e * dy_dx[j] + carry[idx];
                let (lam, w, xpj) = (p.lambda[(i, j)], p.w_d[(i, j)], xp[idx]);
                let s = sigmoid(w * xpj);
                let sp = s * (1.0 - s);
                let drive = lam * xpj + u;
                d_lambda[(i, j)] += ax * s * xpj;
                d_w[(i, j)] += ax * sp * xpj * drive;
                du += ax * s;
                let local = 1.0 + lam * s;
                carry[idx] = ax * if opts.detach_gate { local } else { local + sp * w * drive };
            }
            d_in[(k, i)] = du;
        }
    }
    let mut params = vec![d_lambda, d_c, d_w];
    params.extend(d_wg);
    LayerGrad { params, input: d_in }
}

/// `∂/∂λ` of the ZOH input coefficient `(e^{λΔ} - 1)/λ`.
#[inline]
fn zoh_gain_dlambda(lambda: f64, delta: f64, decay: f64, gain: f64) -> f64 {
    if lambda.abs() < ZOH_LIMIT_EPS {
        0.5 * delta * delta
    } else {
        (delta * decay - gain) / lambda
    }
}

fn s6_backward(p: &S6Params, input: &Matrix, trace: &LayerTrace, d_out: &Matrix) -> LayerGrad {
    let (d, n) = (p.d(), p.n());
    let len = input.rows();
    let lambda: Vec<f64> = p.mu.as_slice().iter().map(|m| -m.exp()).collect();
    let mut d_mu = Matrix::zeros(d, n);
    let mut d_wb = Matrix::zeros(n, d);
    let mut d_wc = Matrix::zeros(n, d);
    let mut d_wd = Matrix::zeros(d, d);
    let mut d_in = Matrix::zeros(len, d);
    let zeros = vec![0.0; d * n];
    let mut carry = vec![0.0; d * n];
    let (mut z, mut b, mut c) = (vec![0.0; d], vec![0.0; n], vec![0.0; n]);
    let (mut dz, mut db, mut dc) = (vec![0.0; d], vec![0.0; n], vec![0.0; n]);
    for k in (0..len).rev() {
        let u = input.row(k);
        p.w_d.matvec_into(u, &mut z);
        p.w_b.matvec_into(u, &mut b);
        p.w_c.matvec_into(u, &mut c);
        dz.fill(0.0);
        db.fill(0.0);
        dc.fill(0.0);
        let x = trace.states.step(k);
        let xp = if k > 0 { trace.states.step(k - 1) } else { &zeros[..] };
        let du_row = d_in.row_mut(k);
        for i in 0..d {
            let e = d_out[(k, i)];
            let delta = softplus(z[i]);
            let mut d_delta = 0.0;
            for j in 0..n {
                let idx = i * n + j;
                dc[j] += e * x[idx];
                let ax = e * c[j] + carry[idx];
                let lam = lambda[idx];
                let (decay, gain) = zoh_coefficients(lam, delta);
                let d_decay = ax * xp[idx];
                let d_gain = ax * b[j] * u[i];
                let d_lam = d_decay * delta * decay + d_gain * zoh_gain_dlambda(lam, delta, decay, gain);
                d_mu[(i, j)] += d_lam * lam;
                d_delta += d_decay * lam * decay + d_gain * decay;
                db[j] += ax * gain * u[i];
                du_row[i] += ax * gain * b[j];
                carry[idx] = ax * decay;
            }
            dz[i] = d_delta * sigmoid(z[i]);
        }
        d_wd.add_outer(&dz, u, 1.0);
        d_wb.add_outer(&db, u, 1.0);
        d_wc.add_outer(&dc, u, 1.0);
        p.w_d.add_matvec_transposed(&dz, du_row);
        p.w_b.add_matvec_transposed(&db, du_row);
        p.w_c.add_matvec_transposed(&dc, du_row);
    }
    LayerGrad { params: vec![d_mu, d_wb, d_wc, d_wd], input: d_in }
}

fn linearized_backward(
    p: &LinearizedParams,
    input: &Matrix,
    trace: &LayerTrace,
    d_out: &Matrix,
) -> LayerGrad {
    let (d, n) = (p.d(), p.n());
    let len = input.rows();
    let mut d_lambda = Matrix::zeros(d, n);
    let mut d_b = Matrix::zeros(d, n);
    let mut d_c = Matrix::zeros(d, n);
    let mut d_wd = Matrix::zeros(d, d);
    let mut d_in = Matrix::zeros(len, d);
    let zeros = vec![0.0; d * n];
    let mut carry = vec![0.0; d * n];
    let mut z = vec![0.0; d];
    let mut dz = vec![0.0; d];
    for k in (0..len).rev() {
        let u = input.row(k);
        p.w_d.matvec_into(u, &mut z);
        let x = trace.states.step(k);
        let xp = if k > 0 { trace.states.step(k - 1) } else { &zeros[..] };
        let du_row = d_in.row_mut(k);
        for i in 0..d {
            let e = d_out[(k, i)];
            let s = sigmoid(z[i]);
            let mut ds = 0.0;
            for j in 0..n {
                let idx = i * n + j;
                d_c[(i, j)] += e * x[idx];
                let ax = e * p.c[(i, j)] + carry[idx];
                let (lam, bij) = (p.lambda[(i, j)], p.b[(i, j)]);
                d_lambda[(i, j)] += ax * s * xp[idx];
                ds += ax * (lam * xp[idx] + bij * u[i]);
                d_b[(i, j)] += ax * s * u[i];
                du_row[i] += ax * s * bij;
                carry[idx] = ax * (1.0 + lam * s);
            }
            dz[i] = ds * s * (1.0 - s);
        }
        d_wd.add_outer(&dz, u, 1.0);
        p.w_d.add_matvec_transposed(&dz, du_row);
    }
    LayerGrad { params: vec![d_lambda, d_b, d_c, d_wd], input: d_in }
}

/// Loss sum, gradients and predictions of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGrad {
    pub loss: f64,
    pub grads: Gradients,
    /// Predicted class at each supervised position.
    pub predictions: Vec<usize>,
}

impl SequenceGrad {
    pub fn all_correct(&self, target: &PredictionTarget) -> bool {
        self.predictions.iter().zip(&target.positions).all(|(p, (_, c))| p == c)
    }
}

/// Forward pass, head and loss at the supervised positions of one sequence.
/// Returns the loss sum and per-position predictions without gradients.
pub fn ih_sequence_loss(
    model: &IhModel,
    indices: &[usize],
    target: &PredictionTarget,
) -> Result<(f64, Vec<usize>)> {
    let input = model.embedding.lookup(indices);
    let trace = model.layer.forward(&input)?;
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(target.positions.len());
    for &(t, class) in &target.positions {
        let (l, pred, _) = head_position(model, trace.outputs.row(t), class, false)?;
        loss += l;
        preds.push(pred);
    }
    Ok((loss, preds))
}

struct HeadGrad {
    d_y: Vec<f64>,
    d_table: Vec<(usize, Vec<f64>)>,
}

/// Distance head at one position: loss, prediction, and optionally the
/// gradients with respect to the output row and the embedding rows.
fn head_position(
    model: &IhModel,
    y: &[f64],
    class: usize,
    want_grad: bool,
) -> Result<(f64, usize, Option<HeadGrad>)> {
    let table = &model.embedding.table;
    let m_count = table.rows();
    if class >= m_count {
        return Err(CoffeeError::InvalidArgument(format!("target class {class} out of range")));
    }
    let diffs: Vec<Vec<f64>> =
        (0..m_count).map(|m| y.iter().zip(table.row(m)).map(|(a, b)| a - b).collect()).collect();
    let dist: Vec<f64> = diffs
        .iter()
        .map(|df| {
            let sq: f64 = df.iter().map(|v| v * v).sum();
            if model.squared_distance {
                sq
            } else {
                sq.sqrt()
            }
        })
        .collect();
    let probs = softmin_rows(&Matrix::from_vec(1, m_count, dist.clone())?).into_vec();
    let logits: Vec<f64> = probs.iter().map(|&p| logit(p)).collect();
    let q = softmax(&logits);
    let loss = log_sum_exp_loss(&logits, class);
    let pred = predict(&logits);
    if !want_grad {
        return Ok((loss, pred, None));
    }
    // d loss / d logit = softmax - onehot.
    let g_logit: Vec<f64> =
        q.iter().enumerate().map(|(m, &v)| v - if m == class { 1.0 } else { 0.0 }).collect();
    let g_p: Vec<f64> = probs
        .iter()
        .zip(&g_logit)
        .map(|(&p, &g)| {
            if p > LOGIT_CLAMP_EPS && p < 1.0 - LOGIT_CLAMP_EPS {
                g / (p * (1.0 - p))
            } else {
                0.0
            }
        })
        .collect();
    let mean: f64 = g_p.iter().zip(&probs).map(|(g, p)| g * p).sum();
    let mut d_y = vec![0.0; y.len()];
    let mut d_table = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let g_d = -probs[m] * (g_p[m] - mean);
        let scale = if model.squared_distance {
            2.0 * g_d
        } else if dist[m] > DISTANCE_FLOOR {
            g_d / dist[m]
        } else {
            0.0
        };
        let row: Vec<f64> = diffs[m].iter().map(|v| scale * v).collect();
        for (a, r) in d_y.iter_mut().zip(&row) {
            *a += r;
        }
        d_table.push((m, row.into_iter().map(|v| -v).collect()));
    }
    Ok((loss, pred, Some(HeadGrad { d_y, d_table })))
}

/// Head loss and prediction for one output row.
pub(crate) fn head_loss(model: &IhModel, y: &[f64], class: usize) -> Result<(f64, usize)> {
    let (l, pred, _) = head_position(model, y, class, false)?;
    Ok((l, pred))
}

fn log_sum_exp_loss(logits: &[f64], class: usize) -> f64 {
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi + logits.iter().map(|v| (v - hi).exp()).sum::<f64>().ln() - logits[class]
}

/// Full backward pass of one sequence through the embedding, the SSM layer
/// and the distance head.
pub fn ih_sequence_grad(
    model: &IhModel,
    indices: &[usize],
    target: &PredictionTarget,
    opts: BackwardOptions,
) -> Result<SequenceGrad> {
    let input = model.embedding.lookup(indices);
    let trace = model.layer.forward(&input)?;
    let (len, d) = (input.rows(), input.cols());
    let mut d_out = Matrix::zeros(len, d);
    let mut d_table = Matrix::zeros(model.embedding.vocab_size(), d);
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(target.positions.len());
    for &(t, class) in &target.positions {
        if t >= len {
            return Err(CoffeeError::InvalidArgument(format!("supervised time {t} beyond length {len}")));
        }
        let (l, pred, g) = head_position(model, trace.outputs.row(t), class, true)?;
        let g = g.expect("requested");
        loss += l;
        predictions.push(pred);
        for (a, v) in d_out.row_mut(t).iter_mut().zip(&g.d_y) {
            *a += v;
        }
        for (m, row) in g.d_table {
            for (a, v) in d_table.row_mut(m).iter_mut().zip(&row) {
                *a += v;
            }
        }
    }
    let lg = layer_backward(&model.layer, &input, &trace, &d_out, opts);
    for (k, &idx) in indices.iter().enumerate() {
        for (a, v) in d_table.row_mut(idx).iter_mut().zip(lg.input.row(k)) {
            *a += v;
        }
    }
    if let Some(r) = model.embedding.frozen_row {
        d_table.row_mut(r).fill(0.0);
    }
    let mut grads = Gradients::zeros_like(model);
    grads.values[0] = d_table;
    if model.train_layer {
        for (dst, src) in grads.values[1..].iter_mut().zip(lg.params) {
            *dst = src;
        }
    }
    Ok(SequenceGrad { loss, grads, predictions })
}

/// Softmax cross-entropy of a logit vector and its gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = log_sum_exp_loss(logits, label);
    let g = p.iter().enumerate().map(|(m, &v)| v - if m == label { 1.0 } else { 0.0 }).collect();
    (loss, g)
}

/// Accumulates `W`, `b` gradients and returns the input gradient.
fn affine_backward(a: &Affine, x: &[f64], d_out: &[f64], dw: &mut Matrix, db: &mut Matrix) -> Vec<f64> {
    dw.add_outer(d_out, x, 1.0);
    for (b, g) in db.as_mut_slice().iter_mut().zip(d_out) {
        *b += g;
    }
    let mut dx = vec![0.0; a.inputs()];
    a.weight.add_matvec_transposed(d_out, &mut dx);
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrad {
    pub loss: f64,
    pub grads: Gradients,
    pub prediction: usize,
}

pub fn mnist_image_grad(model: &MnistModel, image: &Matrix, label: usize) -> Result<ImageGrad> {
    let tr = mnist_forward(model, image)?;
    let (loss, d_logits) = softmax_cross_entropy(&tr.logits, label);
    let prediction = predict(&tr.logits);
    let mut grads = Gradients::zeros_like(model);
    let nt = grads.values.len();
    let (head, rest) = grads.values.split_at_mut(nt - 4);
    let [dw1, db1, dw2, db2] = rest else { unreachable!() };
    let d_act = affine_backward(&model.output, &tr.activation, &d_logits, dw2, db2);
    let d_pre: Vec<f64> =
        d_act.iter().zip(&tr.pre_activation).map(|(g, &v)| g * gelu_prime(v)).collect();
    let d_feat = affine_backward(&model.hidden, &tr.features, &d_pre, dw1, db1);
    let mut offset = 0;
    let width = model.layers[0].d();
    for (v, layer) in model.layers.iter().enumerate() {
        let len = tr.inputs[v].rows();
        let mut d_out = Matrix::zeros(len, width);
        d_out.row_mut(len - 1).copy_from_slice(&d_feat[v * width..(v + 1) * width]);
        let lg = layer_backward(layer, &tr.inputs[v], &tr.layers[v], &d_out, BackwardOptions::default());
        for g in lg.params {
            head[offset] = g;
            offset += 1;
        }
    }
    Ok(ImageGrad { loss, grads, prediction })
}

pub fn smnist_image_grad(model: &SmnistModel, image: &Matrix, label: usize) -> Result<ImageGrad> {
    let tr = smnist_forward(model, image)?;
    let (loss, d_logits) = softmax_cross_entropy(&tr.logits, label);
    let prediction = predict(&tr.logits);
    let mut grads = Gradients::zeros_like(model);
    let nt = grads.values.len();
    let (head, rest) = grads.values.split_at_mut(nt - 2);
    let [dw, db] = rest else { unreachable!() };
    let d_act = affine_backward(&model.output, &tr.activation, &d_logits, dw, db);
    if let (Some(layer), Some(trace)) = (&model.layer, &tr.layer) {
        let d_pre: Vec<f64> =
            d_act.iter().zip(&tr.pre_activation).map(|(g, &v)| g * gelu_prime(v)).collect();
        let d_out = Matrix::from_vec(d_pre.len(), 1, d_pre)?;
        let lg = layer_backward(layer, &tr.input, trace, &d_out, BackwardOptions::default());
        for (dst, g) in head.iter_mut().zip(lg.params) {
            *dst = g;
        }
    }
    Ok(ImageGrad { loss, grads, prediction })
}

/// Sum of the tensor-order gradients of a model-agnostic closure over a
/// batch, computed in parallel and reduced in index order.
pub fn reduce_in_order<M, F>(model: &M, count: usize, f: F) -> Result<(f64, Gradients, Vec<bool>)>
where
    M: Learnable + Sync,
    F: Fn(usize) -> Result<(f64, Gradients, bool)> + Sync,
{
    use rayon::prelude::*;
    let parts: Vec<Result<(f64, Gradients, bool)>> = (0..count).into_par_iter().map(&f).collect();
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut hits = Vec::with_capacity(count);
    for part in parts {
        let (l, g, ok) = part?;
        loss += l;
        total.add_assign(&g);
        hits.push(ok);
    }
    Ok((loss, total, hits))
}
