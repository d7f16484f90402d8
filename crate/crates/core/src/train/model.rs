//! Trainable models and the named-tensor view used by the optimizer,
//! gradient checks and checkpoints.

use crate::error::{CoffeeError, Result};
use crate::numerics::{init_embedding_qr, init_normal, Matrix, RngState};
use crate::pipeline::{EmbeddingTable, Vocab};
use crate::ssm::{ModelKind, SsmLayer};
use crate::tasks::mnist::{Affine, MnistModel, SmnistModel};

/// A model whose learnable arrays can be enumerated in a fixed order.
pub trait Learnable {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;
    /// Re-establish constraints after a parameter update.
    fn after_update(&mut self) {}
}

/// Gradients aligned with [`Learnable::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like<M: Learnable + ?Sized>(model: &M) -> Self {
        let (names, values) =
            model.tensors().into_iter().map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols()))).unzip();
        Self { names, values }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.scale(factor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.names.iter().zip(&self.values).find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(CoffeeError::NonFinite(format!("gradient of '{name}'"))),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }
}

pub(crate) fn layer_tensors<'a>(layer: &'a SsmLayer, prefix: &str) -> Vec<(String, &'a Matrix)> {
    let name = |s: &str| format!("{prefix}{s}");
    match layer {
        SsmLayer::Coffee(p) => {
            let mut v = vec![(name("lambda"), &p.lambda), (name("C"), &p.c), (name("w_D"), &p.w_d)];
            if let Some(w) = &p.w_gamma {
                v.push((name("w_gamma"), w));
            }
            v
        }
        SsmLayer::S6(p) => vec![
            (name("mu"), &p.mu),
            (name("W_B"), &p.w_b),
            (name("W_C"), &p.w_c),
            (name("W_D"), &p.w_d),
        ],
        SsmLayer::Linearized(p) => vec![
            (name("lambda"), &p.lambda),
            (name("B"), &p.b),
            (name("C"), &p.c),
            (name("W_D"), &p.w_d),
        ],
    }
}

pub(crate) fn layer_tensors_mut<'a>(
    layer: &'a mut SsmLayer,
    prefix: &str,
) -> Vec<(String, &'a mut Matrix)> {
    let name = |s: &str| format!("{prefix}{s}");
    match layer {
        SsmLayer::Coffee(p) => {
            let mut v = vec![
                (name("lambda"), &mut p.lambda),
                (name("C"), &mut p.c),
                (name("w_D"), &mut p.w_d),
            ];
            if let Some(w) = &mut p.w_gamma {
                v.push((name("w_gamma"), w));
            }
            v
        }
        SsmLayer::S6(p) => vec![
            (name("mu"), &mut p.mu),
            (name("W_B"), &mut p.w_b),
            (name("W_C"), &mut p.w_c),
            (name("W_D"), &mut p.w_d),
        ],
        SsmLayer::Linearized(p) => vec![
            (name("lambda"), &mut p.lambda),
            (name("B"), &mut p.b),
            (name("C"), &mut p.c),
            (name("W_D"), &mut p.w_d),
        ],
    }
}

fn affine_tensors<'a>(a: &'a Affine, prefix: &str) -> [(String, &'a Matrix); 2] {
    [(format!("{prefix}.weight"), &a.weight), (format!("{prefix}.bias"), &a.bias)]
}

fn affine_tensors_mut<'a>(a: &'a mut Affine, prefix: &str) -> [(String, &'a mut Matrix); 2] {
    [(format!("{prefix}.weight"), &mut a.weight), (format!("{prefix}.bias"), &mut a.bias)]
}

/// SSM layer with a distance head over its own embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct IhModel {
    pub layer: SsmLayer,
    pub embedding: EmbeddingTable,
    pub vocab: Vocab,
    pub squared_distance: bool,
    /// When false only the embedding is learned.
    pub train_layer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IhModelOptions {
    pub output_filter: bool,
    /// Pin this embedding row to all-ones.
    pub frozen_row: Option<usize>,
    pub squared_distance: bool,
}

impl Default for IhModelOptions {
    fn default() -> Self {
        Self { output_filter: false, frozen_row: None, squared_distance: false }
    }
}

impl IhModel {
    /// COFFEE and the linearized cell start from an orthonormal embedding,
    /// S6 from a standard normal one.
    pub fn init(
        kind: ModelKind,
        vocab: Vocab,
        d: usize,
        n: usize,
        options: IhModelOptions,
        rng: &mut RngState,
    ) -> Result<Self> {
        let layer = SsmLayer::init(kind, rng, d, n, options.output_filter)?;
        let table = match kind {
            ModelKind::S6 => init_normal(rng, vocab.len(), d),
            ModelKind::Coffee | ModelKind::Linearized => init_embedding_qr(rng, vocab.len(), d)?,
        };
        let mut embedding = EmbeddingTable::new(table);
        if let Some(r) = options.frozen_row {
            embedding.freeze(r)?;
        }
        Ok(Self {
            layer,
            embedding,
            vocab,
            squared_distance: options.squared_distance,
            train_layer: true,
        })
    }

    pub fn param_count(&self) -> usize {
        let emb_rows = self.vocab.len() - usize::from(self.embedding.frozen_row.is_some());
        let layer = if self.train_layer { self.layer.param_count() } else { 0 };
        layer + emb_rows * self.embedding.d()
    }
}

impl Learnable for IhModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("embedding".to_string(), &self.embedding.table)];
        if self.train_layer {
            v.extend(layer_tensors(&self.layer, ""));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding.table)];
        if self.train_layer {
            v.extend(layer_tensors_mut(&mut self.layer, ""));
        }
        v
    }

    fn after_update(&mut self) {
        self.layer.project();
        self.embedding.refreeze();
    }
}

impl Learnable for MnistModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            v.extend(layer_tensors(l, &format!("view{k}.")));
        }
        v.extend(affine_tensors(&self.hidden, "hidden"));
        v.extend(affine_tensors(&self.output, "output"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = Vec::new();
        for (k, l) in self.layers.iter_mut().enumerate() {
            v.extend(layer_tensors_mut(l, &format!("view{k}.")));
        }
        v.extend(affine_tensors_mut(&mut self.hidden, "hidden"));
        v.extend(affine_tensors_mut(&mut self.output, "output"));
        v
    }

    fn after_update(&mut self) {
        self.layers.iter_mut().for_each(SsmLayer::project);
    }
}

impl Learnable for SmnistModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = Vec::new();
        if let Some(l) = &self.layer {
            v.extend(layer_tensors(l, ""));
        }
        v.extend(affine_tensors(&self.output, "output"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = Vec::new();
        if let Some(l) = &mut self.layer {
            v.extend(layer_tensors_mut(l, ""));
        }
        v.extend(affine_tensors_mut(&mut self.output, "output"));
        v
    }

    fn after_update(&mut self) {
        if let Some(l) = &mut self.layer {
            l.project();
        }
    }
}
