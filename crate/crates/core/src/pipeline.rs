//! Distance-based prediction head: embedding lookup, distances to every
//! embedding, row-wise softmin, logit, argmax, cross-entropy and accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::numerics::Matrix;

/// Probabilities are clamped to `[ε, 1-ε]` before the logit.
pub const LOGIT_CLAMP_EPS: f64 = 1e-12;

/// Ordered symbol set `M` and the task alphabet `V ⊆ M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabSpec", into = "VocabSpec")]
pub struct Vocab {
    symbols: Vec<u32>,
    alphabet: Vec<u32>,
    index: HashMap<u32, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabSpec {
    symbols: Vec<u32>,
    alphabet: Vec<u32>,
}

impl TryFrom<VocabSpec> for Vocab {
    type Error = CoffeeError;
    fn try_from(s: VocabSpec) -> Result<Self> {
        Vocab::new(s.symbols, s.alphabet)
    }
}

impl From<Vocab> for VocabSpec {
    fn from(v: Vocab) -> Self {
        VocabSpec { symbols: v.symbols, alphabet: v.alphabet }
    }
}

impl Vocab {
    pub fn new(symbols: Vec<u32>, alphabet: Vec<u32>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &s) in symbols.iter().enumerate() {
            if index.insert(s, i).is_some() {
                return Err(CoffeeError::InvalidArgument(format!("duplicate symbol {s}")));
            }
        }
        if let Some(&s) = alphabet.iter().find(|s| !index.contains_key(s)) {
            return Err(CoffeeError::InvalidArgument(format!(
                "alphabet symbol {s} is not in the vocabulary"
            )));
        }
        Ok(Self { symbols, alphabet, index })
    }

    /// `M = {0, 1, …, v}` with alphabet `V = {1, …, v}`; `0` is the pad symbol.
    pub fn with_pad(v: u32) -> Self {
        Self::new((0..=v).collect(), (1..=v).collect()).expect("distinct symbols")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn alphabet(&self) -> &[u32] {
        &self.alphabet
    }

    pub fn index_of(&self, symbol: u32) -> Result<usize> {
        self.index.get(&symbol).copied().ok_or(CoffeeError::UnknownSymbol(symbol))
    }

    pub fn symbol(&self, index: usize) -> u32 {
        self.symbols[index]
    }

    pub fn indices(&self, seq: &[u32]) -> Result<Vec<usize>> {
        seq.iter().map(|&s| self.index_of(s)).collect()
    }
}

/// One embedding row per vocabulary symbol, `|M| × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: Matrix,
    /// Row pinned to all-ones; it never receives a gradient.
    pub frozen_row: Option<usize>,
}

impl EmbeddingTable {
    pub fn new(table: Matrix) -> Self {
        Self { table, frozen_row: None }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn d(&self) -> usize {
        self.table.cols()
    }

    /// Pin `row` to all-ones.
    pub fn freeze(&mut self, row: usize) -> Result<()> {
        if row >= self.table.rows() {
            return Err(CoffeeError::InvalidArgument(format!("frozen row {row} out of range")));
        }
        self.frozen_row = Some(row);
        self.refreeze();
        Ok(())
    }

    /// Restore the frozen row after an update.
    pub fn refreeze(&mut self) {
        if let Some(r) = self.frozen_row {
            self.table.row_mut(r).fill(1.0);
        }
    }

    pub fn lookup(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), self.d(), |k, i| self.table[(indices[k], i)])
    }
}

/// Row `k` of the result is the embedding of `seq[k]`.
pub fn embed(vocab: &Vocab, table: &EmbeddingTable, seq: &[u32]) -> Result<Matrix> {
    if vocab.len() != table.vocab_size() {
        return Err(CoffeeError::Shape(format!(
            "vocabulary has {} symbols, embedding table has {} rows",
            vocab.len(),
            table.vocab_size()
        )));
    }
    Ok(table.lookup(&vocab.indices(seq)?))
}

/// `L × |M|` Euclidean distances (squared when `squared` is set).
pub fn distances(outputs: &Matrix, table: &Matrix, squared: bool) -> Result<Matrix> {
    if outputs.cols() != table.cols() {
        return Err(CoffeeError::Shape(format!(
            "outputs have width {}, embeddings have width {}",
            outputs.cols(),
            table.cols()
        )));
    }
    Ok(Matrix::from_fn(outputs.rows(), table.rows(), |l, m| {
        let sq: f64 = outputs.row(l).iter().zip(table.row(m)).map(|(y, e)| (y - e) * (y - e)).sum();
        if squared {
            sq
        } else {
            sq.sqrt()
        }
    }))
}

/// `softmin(x)_i = e^{-x_i} / Σ_j e^{-x_j}` per row, shifted by the row minimum.
pub fn softmin_rows(d: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(d.rows(), d.cols());
    for l in 0..d.rows() {
        let row = d.row(l);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let dst = out.row_mut(l);
        let mut total = 0.0;
        for (o, &x) in dst.iter_mut().zip(row) {
            *o = (lo - x).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    out
}

#[inline]
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(LOGIT_CLAMP_EPS, 1.0 - LOGIT_CLAMP_EPS)
}

/// `ln(p / (1 - p))` of the clamped probability.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = clamp_probability(p);
    (p / (1.0 - p)).ln()
}

pub fn logits_transform(p: &Matrix) -> Matrix {
    p.map(logit)
}

/// Per-sequence `L × |M|` logits for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsArray {
    pub values: Vec<Matrix>,
}

impl LogitsArray {
    pub fn batch(&self) -> usize {
        self.values.len()
    }
}

/// Argmax with ties broken towards the lowest index.
pub fn predict(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Supervised positions of one sequence as `(time index, class index)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictionTarget {
    pub positions: Vec<(usize, usize)>,
}

/// Distances, softmin probabilities and logits of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub distances: Matrix,
    pub probs: Matrix,
    pub logits: Matrix,
}

pub fn head_forward(outputs: &Matrix, table: &Matrix, squared: bool) -> Result<HeadTrace> {
    let distances = distances(outputs, table, squared)?;
    let probs = softmin_rows(&distances);
    let logits = logits_transform(&probs);
    Ok(HeadTrace { distances, probs, logits })
}

/// Numerically stable `softmax(row)`.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - hi).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi + row.iter().map(|v| (v - hi).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over all supervised positions of the batch,
/// and its gradient with respect to every logit.
pub fn cross_entropy(
    logits: &LogitsArray,
    targets: &[PredictionTarget],
) -> Result<(f64, Vec<Matrix>)> {
    if logits.batch() != targets.len() {
        return Err(CoffeeError::Shape(format!(
            "{} logit sequences but {} targets",
            logits.batch(),
            targets.len()
        )));
    }
    let count: usize = targets.iter().map(|t| t.positions.len()).sum();
    if count == 0 {
        return Err(CoffeeError::InvalidArgument("no supervised positions".into()));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (lg, tgt) in logits.values.iter().zip(targets) {
        let mut g = Matrix::zeros(lg.rows(), lg.cols());
        for &(t, class) in &tgt.positions {
            if t >= lg.rows() || class >= lg.cols() {
                return Err(CoffeeError::InvalidArgument(format!(
                    "target ({t}, {class}) outside a {} x {} logit array",
                    lg.rows(),
                    lg.cols()
                )));
            }
            let row = lg.row(t);
            loss += (log_sum_exp(row) - row[class]) * scale;
            let p = softmax(row);
            let grow = g.row_mut(t);
            for (m, pm) in p.into_iter().enumerate() {
                grow[m] += (pm - if m == class { 1.0 } else { 0.0 }) * scale;
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyMode {
    PerPosition,
    PerSequence,
}

/// `predictions[b][t]` is the predicted class at time `t` of sequence `b`.
pub fn accuracy(
    predictions: &[Vec<usize>],
    targets: &[PredictionTarget],
    mode: AccuracyMode,
) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(CoffeeError::Shape("predictions and targets differ in batch size".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (pred, tgt) in predictions.iter().zip(targets) {
        let mut seq_ok = true;
        for &(t, class) in &tgt.positions {
            let ok = pred.get(t) == Some(&class);
            if mode == AccuracyMode::PerPosition {
                hits += ok as usize;
                total += 1;
            }
            seq_ok &= ok;
        }
        if mode == AccuracyMode::PerSequence {
            hits += seq_ok as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Argmax prediction at every time step.
pub fn predict_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|l| predict(logits.row(l))).collect()
}
