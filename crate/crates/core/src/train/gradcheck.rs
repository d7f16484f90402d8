//! Central finite-difference checks of the hand-written backward passes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::numerics::{init_normal, sigmoid, Matrix, RngState};
use crate::pipeline::{EmbeddingTable, PredictionTarget, Vocab};
use crate::ssm::{coffee_output, CoffeeParams, ModelKind, SsmLayer, StateTrajectory};
use crate::tasks::mnist::{
    mnist_forward, mnist_head, smnist_forward, MnistModel, SmnistModel, CROP_SIDE, MNIST_SIDE,
};

use super::backward::{
    head_loss, ih_sequence_grad, ih_sequence_loss, mnist_image_grad, smnist_image_grad,
    softmax_cross_entropy, BackwardOptions,
};
use super::model::{Gradients, IhModel, Learnable};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const HEAD_GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub n: usize,
    pub d: usize,
    pub len: usize,
    /// Embedding rows `|M|`.
    pub vocab: usize,
    /// Supervised positions at the end of each sequence.
    pub l_tar: usize,
    pub batch: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self { n: 3, d: 4, len: 8, vocab: 5, l_tar: 2, batch: 3 }
    }
}

impl GradCheckDims {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.len == 0 || self.vocab < 2 || self.batch == 0 {
            return Err(CoffeeError::InvalidArgument(
                "gradient check needs n, D, L, batch >= 1 and at least two embedding rows".into(),
            ));
        }
        if self.l_tar == 0 || self.l_tar > self.len {
            return Err(CoffeeError::InvalidArgument("need 1 <= l_tar <= L".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
    pub tolerance: f64,
}

impl GroupError {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub label: String,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupError::passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.label)?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<16} entries {:>5}  max rel err {:.3e}  (tol {:.0e}) {}",
                g.name,
                g.entries,
                g.max_rel_err,
                g.tolerance,
                if g.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "  max rel err {:.3e}: {}", self.max_rel_err(), if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// `|a - fd| / max(1, |a|)`.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

/// Compare `analytic` with central differences of `loss`, tensor by tensor.
/// Entries for which `skip(name, flat index)` holds must have an analytic
/// gradient of exactly zero instead.
pub fn compare_fd<M, L>(
    model: &M,
    analytic: &Gradients,
    h: f64,
    tolerance: impl Fn(&str) -> f64,
    skip: impl Fn(&str, usize) -> bool,
    loss: L,
) -> Result<Vec<GroupError>>
where
    M: Learnable + Clone,
    L: Fn(&M) -> Result<f64>,
{
    let mut probe = model.clone();
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let a = &analytic.values[k];
        let mut worst: f64 = 0.0;
        for e in 0..a.len() {
            if skip(name, e) {
                if a.as_slice()[e] != 0.0 {
                    worst = f64::INFINITY;
                }
                continue;
            }
            let orig = probe.tensors()[k].1.as_slice()[e];
            let set = |p: &mut M, v: f64| p.tensors_mut()[k].1.as_mut_slice()[e] = v;
            set(&mut probe, orig + h);
            let lp = loss(&probe)?;
            set(&mut probe, orig - h);
            let lm = loss(&probe)?;
            set(&mut probe, orig);
            worst = worst.max(rel_err(a.as_slice()[e], (lp - lm) / (2.0 * h)));
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_err: worst,
            entries: a.len(),
            tolerance: tolerance(name),
        });
    }
    Ok(groups)
}

/// Random tiny induction-head model with λ away from its bounds and a
/// standard normal embedding.
pub fn tiny_ih_model(
    kind: ModelKind,
    dims: &GradCheckDims,
    output_filter: bool,
    rng: &mut RngState,
) -> Result<IhModel> {
    dims.validate()?;
    let mut layer = SsmLayer::init(kind, rng, dims.d, dims.n, output_filter)?;
    match &mut layer {
        SsmLayer::Coffee(p) => p.lambda = Matrix::from_fn(dims.d, dims.n, |_, _| rng.uniform_range(-1.5, -0.1)),
        SsmLayer::Linearized(p) => {
            p.lambda = Matrix::from_fn(dims.d, dims.n, |_, _| rng.uniform_range(-1.5, -0.1))
        }
        SsmLayer::S6(p) => {
            for m in p.mu.as_mut_slice() {
                *m += 0.3 * rng.normal();
            }
        }
    }
    let symbols: Vec<u32> = (0..dims.vocab as u32).collect();
    let vocab = Vocab::new(symbols.clone(), symbols[1..].to_vec())?;
    Ok(IhModel {
        layer,
        embedding: EmbeddingTable::new(init_normal(rng, dims.vocab, dims.d)),
        vocab,
        squared_distance: false,
        train_layer: true,
    })
}

/// Random index sequences supervised at their last `l_tar` positions.
pub fn tiny_batch(dims: &GradCheckDims, rng: &mut RngState) -> Vec<(Vec<usize>, PredictionTarget)> {
    (0..dims.batch)
        .map(|_| {
            let idx: Vec<usize> = (0..dims.len).map(|_| rng.below(dims.vocab)).collect();
            let positions =
                (dims.len - dims.l_tar..dims.len).map(|t| (t, rng.below(dims.vocab))).collect();
            (idx, PredictionTarget { positions })
        })
        .collect()
}

fn batch_grad(
    model: &IhModel,
    batch: &[(Vec<usize>, PredictionTarget)],
    opts: BackwardOptions,
) -> Result<Gradients> {
    let mut g = Gradients::zeros_like(model);
    for (idx, t) in batch {
        g.add_assign(&ih_sequence_grad(model, idx, t, opts)?.grads);
    }
    Ok(g)
}

fn batch_loss(model: &IhModel, batch: &[(Vec<usize>, PredictionTarget)]) -> Result<f64> {
    let mut total = 0.0;
    for (idx, t) in batch {
        total += ih_sequence_loss(model, idx, t)?.0;
    }
    Ok(total)
}

fn frozen_skip(model: &IhModel) -> impl Fn(&str, usize) -> bool {
    let frozen = model.embedding.frozen_row;
    let d = model.embedding.d();
    move |name, e| name == "embedding" && frozen == Some(e / d)
}

/// Full induction-head pipeline for one random tiny instance.
pub fn grad_check_ih(
    kind: ModelKind,
    dims: &GradCheckDims,
    output_filter: bool,
    frozen_row: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut model = tiny_ih_model(kind, dims, output_filter, &mut rng)?;
    if let Some(r) = frozen_row {
        model.embedding.freeze(r)?;
    }
    let batch = tiny_batch(dims, &mut rng);
    let analytic = batch_grad(&model, &batch, BackwardOptions::default())?;
    let groups = compare_fd(&model, &analytic, FD_STEP, |_| GRAD_TOL, frozen_skip(&model), |m| {
        batch_loss(m, &batch)
    })?;
    let label = format!(
        "{kind}{} n={} D={} L={} |M|={} seed={seed}",
        if output_filter { "+filter" } else { "" },
        dims.n,
        dims.d,
        dims.len,
        dims.vocab
    );
    Ok(GradCheckReport { label, groups })
}

/// [`grad_check_ih`] without output filter or frozen row.
pub fn grad_check(kind: ModelKind, dims: &GradCheckDims, seed: u64) -> Result<GradCheckReport> {
    grad_check_ih(kind, dims, false, None, seed)
}

/// COFFEE forward in which the gate reads `frozen` instead of the live state.
fn coffee_forward_frozen_gate(
    p: &CoffeeParams,
    input: &Matrix,
    frozen: &StateTrajectory,
) -> Matrix {
    let (d, n) = (p.d(), p.n());
    let len = input.rows();
    let mut out = Matrix::zeros(len, d);
    let mut prev = vec![0.0; d * n];
    let mut cur = vec![0.0; d * n];
    for k in 0..len {
        for i in 0..d {
            for j in 0..n {
                let idx = i * n + j;
                let gate_in = if k > 0 { frozen.get(k - 1, i, j) } else { 0.0 };
                let s = sigmoid(p.w_d[(i, j)] * gate_in);
                cur[idx] = (1.0 + p.lambda[(i, j)] * s) * prev[idx] + s * input[(k, i)];
            }
            out[(k, i)] = coffee_output(p, i, &cur[i * n..(i + 1) * n]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetachCheck {
    /// Detached gradients against differences of the frozen-gate forward.
    pub report: GradCheckReport,
    /// `max |∂w_D(full) - ∂w_D(detached)|`.
    pub w_d_change: f64,
    /// Same for the embedding; the input path through the gate also drops.
    pub other_change: f64,
}

/// With the gate detached, the backward pass must equal the exact gradient
/// of a forward pass whose gate reads a frozen copy of the state trajectory.
pub fn detach_gate_check(dims: &GradCheckDims, seed: u64) -> Result<DetachCheck> {
    let mut rng = RngState::new(seed);
    let model = tiny_ih_model(ModelKind::Coffee, dims, false, &mut rng)?;
    let batch = tiny_batch(dims, &mut rng);
    let full = batch_grad(&model, &batch, BackwardOptions::default())?;
    let detached = batch_grad(&model, &batch, BackwardOptions { detach_gate: true })?;
    let frozen: Vec<StateTrajectory> = batch
        .iter()
        .map(|(idx, _)| Ok(model.layer.forward(&model.embedding.lookup(idx))?.states))
        .collect::<Result<_>>()?;
    let loss = |m: &IhModel| -> Result<f64> {
        let SsmLayer::Coffee(p) = &m.layer else { unreachable!() };
        let mut total = 0.0;
        for ((idx, t), fr) in batch.iter().zip(&frozen) {
            let out = coffee_forward_frozen_gate(p, &m.embedding.lookup(idx), fr);
            for &(time, class) in &t.positions {
                total += head_loss(m, out.row(time), class)?.0;
            }
        }
        Ok(total)
    };
    let groups = compare_fd(&model, &detached, FD_STEP, |_| GRAD_TOL, |_, _| false, loss)?;
    let diff = |name: &str| {
        full.get(name).expect("tensor").max_abs_diff(detached.get(name).expect("tensor"))
    };
    Ok(DetachCheck {
        report: GradCheckReport { label: format!("coffee detached gate seed={seed}"), groups },
        w_d_change: diff("w_D"),
        other_change: diff("embedding"),
    })
}

fn head_tolerance(name: &str) -> f64 {
    if name.starts_with("hidden.") || name.starts_with("output.") {
        HEAD_GRAD_TOL
    } else {
        GRAD_TOL
    }
}

/// Four-view MNIST model on a random image; head groups use the tighter
/// tolerance.
pub fn grad_check_mnist(kind: ModelKind, n: usize, output_filter: bool, seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut model = MnistModel::init(kind, n, output_filter, &mut rng)?;
    for l in &mut model.layers {
        if let SsmLayer::Coffee(p) = l {
            p.lambda = Matrix::from_fn(p.d(), p.n(), |_, _| rng.uniform_range(-1.5, -0.1));
        }
    }
    let image = Matrix::from_fn(CROP_SIDE, CROP_SIDE, |_, _| rng.uniform());
    let label = rng.below(10);
    let analytic = mnist_image_grad(&model, &image, label)?.grads;
    // Head perturbations leave the SSM features unchanged.
    let cached = mnist_forward(&model, &image)?.features;
    let groups = compare_fd(&model, &analytic, FD_STEP, head_tolerance, |_, _| false, |m| {
        let logits = if m.layers == model.layers {
            mnist_head(m, &cached).2
        } else {
            mnist_forward(m, &image)?.logits
        };
        Ok(softmax_cross_entropy(&logits, label).0)
    })?;
    Ok(GradCheckReport { label: format!("mnist {kind} n={n} seed={seed}"), groups })
}

/// Sequential-pixel model on a random image.
pub fn grad_check_smnist(kind: Option<ModelKind>, n: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let model = SmnistModel::init(kind, n, &mut rng)?;
    let image = Matrix::from_fn(MNIST_SIDE, MNIST_SIDE, |_, _| rng.uniform());
    let label = rng.below(10);
    let analytic = smnist_image_grad(&model, &image, label)?.grads;
    let groups = compare_fd(&model, &analytic, FD_STEP, head_tolerance, |_, _| false, |m| {
        Ok(softmax_cross_entropy(&smnist_forward(m, &image)?.logits, label).0)
    })?;
    let what = kind.map_or("none".to_string(), |k| k.to_string());
    Ok(GradCheckReport { label: format!("smnist {what} n={n} seed={seed}"), groups })
}
