//! Named configurations for every reproduced experiment.

use anyhow::{bail, Result};

use coffee_core::numerics::RngState;
use coffee_core::ssm::ModelKind;
use coffee_core::tasks::ih::IHConfig;
use coffee_core::tasks::mnist::{AugmentConfig, VALIDATION_SIZE};
use coffee_core::train::{LrDrop, TrainConfig};

use crate::config::{Expectation, IhRun, ImageRun, Reference, RunConfig};

/// Stream tag for drawing the trigger of a preset from its seed.
pub const TRIGGER_TAG: u64 = 0x7216_6E72;

/// Per-sequence accuracy the L_seq = 16 desk run must exceed; calibrated
/// from oracle runs over several seeds.
pub const SMOKE_L16_MIN_ACCURACY: f64 = 0.28;

/// Test accuracy the 5-epoch MNIST run must exceed. Provisional: no copy of
/// the data was reachable when the presets were written, so this is a
/// conservative floor rather than a calibrated one.
pub const MNIST_SMOKE_MIN_ACCURACY: f64 = 0.85;

pub const PRESETS: &[(&str, &str)] = &[
    ("table1-coffee", "IH L_seq=16, COFFEE n=8 D=16, lr 0.01"),
    ("table1-s6", "IH L_seq=16, S6 n=8 D=16, lr 0.003"),
    ("table1-smoke", "IH L_seq=16, COFFEE n=8 D=16, 50k training sequences"),
    ("table2", "IH L_seq=16, COFFEE n=1 D=9, lr 0.01"),
    ("table3-noise1", "IH with one noise symbol between trigger and target"),
    ("table3-noise2", "IH with two noise symbols between trigger and target"),
    ("table4", "IH L_tar=2, COFFEE n=8 D=16, lr 0.01"),
    ("table5", "IH L_tri=2, COFFEE n=8 D=16, lr 0.003"),
    ("table6-L32", "IH L_seq=32, COFFEE n=8 D=16, lr 0.01"),
    ("table6-L64", "IH L_seq=64, COFFEE n=8 D=16, lr 0.01"),
    ("table6-L128", "IH L_seq=128, COFFEE n=8 D=16, lr 0.01"),
    ("table6-L256", "IH L_seq=256, COFFEE n=8 D=16, lr 0.01"),
    ("smoke", "IH L_seq=8, 200 small batches"),
    ("table7-coffee", "MNIST four views, COFFEE n=2"),
    ("table7-coffee-filter", "MNIST four views, COFFEE n=2 with output filter"),
    ("table7-s6-n2", "MNIST four views, S6 n=2"),
    ("table7-s6-n16", "MNIST four views, S6 n=16"),
    ("table7-smoke", "MNIST four views, COFFEE n=2, 5 epochs"),
    ("smnist", "sequential MNIST, COFFEE n=8"),
    ("smnist-no-ssm", "sequential MNIST without the SSM layer"),
];

pub fn preset_names() -> String {
    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

struct Ih {
    model: ModelKind,
    n: usize,
    d: usize,
    lr: f64,
    l_seq: usize,
    l_tri: usize,
    l_tar: usize,
    gap: Option<usize>,
    expect: Option<Expectation>,
    reference: Option<Reference>,
}

impl Ih {
    fn coffee(lr: f64) -> Self {
        Self {
            model: ModelKind::Coffee,
            n: 8,
            d: 16,
            lr,
            l_seq: 16,
            l_tri: 1,
            l_tar: 1,
            gap: None,
            expect: Some(Expectation::at_least(0.99)),
            reference: None,
        }
    }

    fn reference(mut self, loss: f64, accuracy: f64) -> Self {
        self.reference = Some(Reference { loss, accuracy });
        self
    }

    fn build(self, name: &str, seed: u64) -> Result<RunConfig> {
        let mut trig = RngState::derive(seed, TRIGGER_TAG);
        let mut ih = IHConfig::standard(self.l_seq, self.l_tri, self.l_tar, &mut trig)?;
        ih.l_noise_between = self.gap;
        Ok(RunConfig::Ih(IhRun {
            preset: Some(name.to_string()),
            model: self.model,
            n: self.n,
            d: self.d,
            output_filter: false,
            frozen_row: None,
            squared_distance: false,
            ih,
            train: TrainConfig { lr: self.lr, seed, ..TrainConfig::default() },
            expect: self.expect,
            reference: self.reference,
        }))
    }
}

fn image(name: &str, model: Option<ModelKind>, n: usize, threshold: f64, seed: u64) -> ImageRun {
    ImageRun {
        preset: Some(name.to_string()),
        model,
        n,
        output_filter: false,
        augment: AugmentConfig::default(),
        val_size: VALIDATION_SIZE,
        train_limit: None,
        train: TrainConfig {
            steps_per_epoch: 1,
            lr: 0.01,
            lr_drop: Some(LrDrop { threshold, lr: 0.005 }),
            early_stop_accuracy: None,
            seed,
            ..TrainConfig::default()
        },
        expect: None,
        reference: None,
    }
}

fn mnist(name: &str, kind: ModelKind, n: usize, seed: u64, reference: (f64, f64), tol: f64) -> RunConfig {
    let mut r = image(name, Some(kind), n, 0.45, seed);
    r.reference = Some(Reference { loss: reference.0, accuracy: reference.1 });
    r.expect = Some(Expectation::within(reference.1, tol));
    RunConfig::Mnist(r)
}

/// Expand a preset for `seed`.
pub fn preset(name: &str, seed: u64) -> Result<RunConfig> {
    let cfg = match name {
        "table1-coffee" => Ih::coffee(0.01).reference(0.0, 0.99).build(name, seed)?,
        "table1-s6" => Ih {
            model: ModelKind::S6,
            expect: Some(Expectation::within(0.68, 0.05)),
            ..Ih::coffee(0.003)
        }
        .reference(0.852, 0.68)
        .build(name, seed)?,
        "table1-smoke" => {
            let mut c = Ih { expect: Some(Expectation::at_least(SMOKE_L16_MIN_ACCURACY)), ..Ih::coffee(0.01) }
                .build(name, seed)?;
            let t = c.train_mut();
            // 98 x 512 = 50 176 sequences.
            t.steps_per_epoch = 98;
            t.max_epochs = 1;
            c
        }
        "table2" => Ih { n: 1, d: 9, ..Ih::coffee(0.01) }.reference(0.0, 0.99).build(name, seed)?,
        "table3-noise1" => Ih { gap: Some(1), ..Ih::coffee(0.003) }.reference(0.0, 0.99).build(name, seed)?,
        "table3-noise2" => Ih { gap: Some(2), ..Ih::coffee(0.003) }.reference(0.002, 0.99).build(name, seed)?,
        "table4" => Ih { l_tar: 2, expect: Some(Expectation::at_least(0.985)), ..Ih::coffee(0.01) }
            .reference(0.004, 0.99)
            .build(name, seed)?,
        "table5" => Ih { l_tri: 2, expect: Some(Expectation::within(0.78, 0.05)), ..Ih::coffee(0.003) }
            .reference(0.660, 0.78)
            .build(name, seed)?,
        "table6-L32" => Ih { l_seq: 32, ..Ih::coffee(0.01) }.reference(0.0, 0.99).build(name, seed)?,
        "table6-L64" => Ih { l_seq: 64, ..Ih::coffee(0.01) }.reference(0.001, 0.99).build(name, seed)?,
        "table6-L128" => Ih { l_seq: 128, ..Ih::coffee(0.01) }.reference(0.0, 0.99).build(name, seed)?,
        "table6-L256" => Ih { l_seq: 256, ..Ih::coffee(0.01) }.reference(0.001, 0.99).build(name, seed)?,
        "smoke" => {
            let mut c = Ih { l_seq: 8, expect: None, ..Ih::coffee(0.01) }.build(name, seed)?;
            let t = c.train_mut();
            t.batch_size = 64;
            t.steps_per_epoch = 200;
            t.max_epochs = 1;
            t.eval_size = 1000;
            c
        }
        "table7-coffee" => mnist(name, ModelKind::Coffee, 2, seed, (0.107, 0.966), 0.01),
        "table7-coffee-filter" => {
            let mut c = mnist(name, ModelKind::Coffee, 2, seed, (0.100, 0.970), 0.01);
            if let RunConfig::Mnist(r) = &mut c {
                r.output_filter = true;
            }
            c
        }
        "table7-s6-n2" => mnist(name, ModelKind::S6, 2, seed, (1.891, 0.282), 0.05),
        "table7-s6-n16" => mnist(name, ModelKind::S6, 16, seed, (1.876, 0.286), 0.05),
        "table7-smoke" => {
            let mut r = image(name, Some(ModelKind::Coffee), 2, 0.45, seed);
            r.train.max_epochs = 5;
            r.expect = Some(Expectation::at_least(MNIST_SMOKE_MIN_ACCURACY));
            RunConfig::Mnist(r)
        }
        "smnist" => {
            let mut r = image(name, Some(ModelKind::Coffee), 8, 0.15, seed);
            r.reference = Some(Reference { loss: 0.226, accuracy: 0.936 });
            r.expect = Some(Expectation::within(0.936, 0.01));
            RunConfig::Smnist(r)
        }
        "smnist-no-ssm" => {
            let mut r = image(name, None, 1, 0.15, seed);
            r.reference = Some(Reference { loss: 0.284, accuracy: 0.920 });
            r.expect = Some(Expectation::within(0.920, 0.01));
            RunConfig::Smnist(r)
        }
        other => bail!("unknown preset '{other}'; available presets: {}", preset_names()),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_preset_expands_and_validates() {
        for (name, _) in PRESETS {
            let c = preset(name, 0).unwrap();
            c.validate().unwrap();
            assert_eq!(c.preset(), Some(*name));
        }
    }

    #[test]
    fn unknown_preset_lists_alternatives() {
        let e = preset("table9", 0).unwrap_err().to_string();
        assert!(e.contains("table9") && e.contains("table1-coffee"), "{e}");
    }

    #[test]
    fn trigger_follows_seed() {
        let a = preset("table5", 1).unwrap();
        let b = preset("table5", 1).unwrap();
        assert_eq!(a, b);
    }
}
