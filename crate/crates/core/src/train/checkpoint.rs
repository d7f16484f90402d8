//! Portable JSON checkpoints. Tensors are stored as base64 of little-endian
//! `f64` bytes so that a round trip is bit-exact; the whole document carries
//! a SHA-256 checksum over its canonical serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CoffeeError, Result};
use crate::numerics::Matrix;
use crate::ssm::ModelKind;

use crate::numerics::RngState;
use crate::pipeline::{EmbeddingTable, Vocab};
use crate::ssm::SsmLayer;
use crate::tasks::ih0::ih0_model;
use crate::tasks::mnist::{MnistModel, SmnistModel};

use super::adam::AdamState;
use super::model::{IhModel, Learnable};

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: String,
}

impl TensorRecord {
    pub fn encode(m: &Matrix) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { shape: [m.rows(), m.cols()], data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self, name: &str) -> Result<Matrix> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| CoffeeError::CheckpointSchema(format!("tensor '{name}': {e}")))?;
        let [rows, cols] = self.shape;
        if bytes.len() != rows * cols * 8 {
            return Err(CoffeeError::CheckpointSchema(format!(
                "tensor '{name}' holds {} bytes, shape {rows} x {cols} needs {}",
                bytes.len(),
                rows * cols * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, TensorRecord>,
    pub v: BTreeMap<String, TensorRecord>,
}

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,step,split,loss,accuracy,lr,wall_ms";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.split, self.loss, self.accuracy, self.lr, self.wall_ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || CoffeeError::InvalidArgument(format!("malformed metrics line '{line}'"));
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            split: f[2].to_string(),
            loss: f[3].parse().map_err(|_| bad())?,
            accuracy: f[4].parse().map_err(|_| bad())?,
            lr: f[5].parse().map_err(|_| bad())?,
            wall_ms: f[6].parse().map_err(|_| bad())?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => return Err(CoffeeError::InvalidArgument("metrics CSV header missing".into())),
    }
    lines.map(MetricRow::parse_csv_line).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u64,
    /// `ih`, `ih0`, `mnist` or `smnist`.
    pub task: String,
    pub model: ModelKind,
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub vocab: Vec<u32>,
    #[serde(default)]
    pub alphabet: Vec<u32>,
    #[serde(default)]
    pub output_filter: bool,
    #[serde(default)]
    pub frozen_row: Option<usize>,
    #[serde(default)]
    pub squared_distance: bool,
    #[serde(default = "yes")]
    pub with_ssm: bool,
    pub params: BTreeMap<String, TensorRecord>,
    #[serde(default)]
    pub adam: Option<AdamRecord>,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub metrics: Vec<MetricRow>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

fn yes() -> bool {
    true
}

impl Checkpoint {
    /// Envelope with the given metadata and no tensors yet.
    pub fn new(task: &str, model: ModelKind, n: usize, d: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            task: task.to_string(),
            model,
            n,
            d,
            vocab: Vec::new(),
            alphabet: Vec::new(),
            output_filter: false,
            frozen_row: None,
            squared_distance: false,
            with_ssm: true,
            params: BTreeMap::new(),
            adam: None,
            config: Value::Null,
            metrics: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub fn store_params<M: Learnable + ?Sized>(&mut self, model: &M) {
        self.params =
            model.tensors().into_iter().map(|(n, m)| (n, TensorRecord::encode(m))).collect();
    }

    pub fn store_adam<M: Learnable + ?Sized>(&mut self, model: &M, adam: &AdamState) {
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let pack = |ms: &[Matrix]| -> BTreeMap<String, TensorRecord> {
            names.iter().cloned().zip(ms.iter().map(TensorRecord::encode)).collect()
        };
        self.adam = Some(AdamRecord {
            t: adam.t,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            m: pack(&adam.m),
            v: pack(&adam.v),
        });
    }

    /// Overwrite every tensor of `model` from the stored arrays.
    pub fn restore_params<M: Learnable + ?Sized>(&self, model: &mut M) -> Result<()> {
        for (name, dst) in model.tensors_mut() {
            let rec = self
                .params
                .get(&name)
                .ok_or_else(|| CoffeeError::CheckpointSchema(format!("missing tensor '{name}'")))?;
            let m = rec.decode(&name)?;
            if m.shape() != dst.shape() {
                return Err(CoffeeError::CheckpointSchema(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    m.shape(),
                    dst.shape()
                )));
            }
            *dst = m;
        }
        Ok(())
    }

    pub fn restore_adam<M: Learnable + ?Sized>(&self, model: &M) -> Result<Option<AdamState>> {
        let Some(rec) = &self.adam else { return Ok(None) };
        let mut state = AdamState::new(model, rec.lr);
        state.t = rec.t;
        state.beta1 = rec.beta1;
        state.beta2 = rec.beta2;
        state.eps = rec.eps;
        for (k, (name, _)) in model.tensors().into_iter().enumerate() {
            let get = |map: &BTreeMap<String, TensorRecord>| {
                map.get(&name)
                    .ok_or_else(|| CoffeeError::CheckpointSchema(format!("missing moment '{name}'")))
                    .and_then(|r| r.decode(&name))
            };
            state.m[k] = get(&rec.m)?;
            state.v[k] = get(&rec.v)?;
        }
        Ok(Some(state))
    }

    pub fn param(&self, name: &str) -> Result<Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| CoffeeError::CheckpointSchema(format!("missing tensor '{name}'")))?
            .decode(name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        let digest = checksum(&value)?;
        value
            .as_object_mut()
            .expect("checkpoint serializes to an object")
            .insert("checksum".into(), Value::String(digest));
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)
            .map_err(|e| CoffeeError::CheckpointSchema(format!("not valid JSON: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CoffeeError::CheckpointSchema("top level must be an object".into()))?;
        let version = obj
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| CoffeeError::CheckpointSchema("missing integer 'version'".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(CoffeeError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let stored = match obj.remove("checksum") {
            Some(Value::String(s)) => s,
            _ => return Err(CoffeeError::CheckpointSchema("missing 'checksum'".into())),
        };
        let computed = checksum(&value)?;
        if computed != stored {
            return Err(CoffeeError::CheckpointChecksum { stored, computed });
        }
        serde_json::from_value(value).map_err(|e| CoffeeError::CheckpointSchema(e.to_string()))
    }
}

fn checksum(value: &Value) -> Result<String> {
    let canonical = serde_json::to_string(value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

/// A model rebuilt from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Ih(IhModel),
    Mnist(MnistModel),
    Smnist(SmnistModel),
}

impl Checkpoint {
    /// Rebuild the model structure recorded in the envelope and fill in the
    /// stored tensors.
    pub fn load_model(&self) -> Result<LoadedModel> {
        // Initial values are overwritten; the seed only fixes the structure.
        let mut rng = RngState::new(0);
        match self.task.as_str() {
            "ih" | "ih0" => {
                let vocab = Vocab::new(self.vocab.clone(), self.alphabet.clone())?;
                let layer = if self.task == "ih0" {
                    SsmLayer::Coffee(ih0_model())
                } else {
                    SsmLayer::init(self.model, &mut rng, self.d, self.n, self.output_filter)?
                };
                let mut embedding =
                    EmbeddingTable::new(Matrix::zeros(vocab.len(), self.d));
                embedding.frozen_row = self.frozen_row;
                let mut m = IhModel {
                    layer,
                    embedding,
                    vocab,
                    squared_distance: self.squared_distance,
                    train_layer: self.task == "ih",
                };
                self.restore_params(&mut m)?;
                Ok(LoadedModel::Ih(m))
            }
            "mnist" => {
                let mut m = MnistModel::init(self.model, self.n, self.output_filter, &mut rng)?;
                self.restore_params(&mut m)?;
                Ok(LoadedModel::Mnist(m))
            }
            "smnist" => {
                let kind = self.with_ssm.then_some(self.model);
                let mut m = SmnistModel::init(kind, self.n.max(1), &mut rng)?;
                self.restore_params(&mut m)?;
                Ok(LoadedModel::Smnist(m))
            }
            other => Err(CoffeeError::CheckpointSchema(format!("unknown task '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("ih", ModelKind::Coffee, 2, 3);
        let m = Matrix::from_vec(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        c.params.insert("C".into(), TensorRecord::encode(&m));
        c.vocab = vec![0, 1, 2];
        c
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = sample();
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let a = back.param("C").unwrap();
        assert_eq!(a.as_slice()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_documents() {
        let text = sample().to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2]),
            Err(CoffeeError::CheckpointSchema(_))
        ));
        let v2 = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            Checkpoint::from_json(&v2),
            Err(CoffeeError::CheckpointVersion { found: 2, expected: 1 })
        ));
        let tampered = text.replacen("\"n\": 2", "\"n\": 3", 1);
        assert!(matches!(Checkpoint::from_json(&tampered), Err(CoffeeError::CheckpointChecksum { .. })));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![MetricRow {
            epoch: 1,
            step: 10,
            split: "val".into(),
            loss: 0.25,
            accuracy: 0.5,
            lr: 0.01,
            wall_ms: 0,
        }];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("epoch,step,split,loss,accuracy,lr,wall_ms\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
    }
}
