//! `train-ih`, `train-mnist`, `train-smnist` and `eval`.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use coffee_core::numerics::RngState;
use coffee_core::tasks::ih::{gen_ih_batch, IHConfig};
use coffee_core::tasks::ih0::ih0_accuracy;
use coffee_core::tasks::mnist::{mnist_load_with, MnistModel, MnistSplits, SmnistModel};
use coffee_core::train::{
    evaluate_ih, evaluate_images, load_checkpoint, train_ih, train_mnist, train_smnist, Checkpoint,
    EvalResult, IhModel, IhModelOptions, ImageModel, LoadedModel, MetricRow, EVAL_SEED_XOR,
};

use crate::config::{ImageRun, RunConfig};
use crate::presets::preset;
use crate::rundir::{default_run_dir, RunDir};
use crate::Common;

/// Stream tag for parameter initialization.
pub const INIT_TAG: u64 = 0x1417;
/// Stream tag for evaluation sets drawn by `eval`.
const EVAL_CMD_TAG: u64 = 0xE7A1;

pub const MNIST_ENV: &str = "COFFEE_MNIST_DIR";

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batches per epoch (induction head only).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    /// Train on only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Training images held out for validation (image tasks).
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Directory holding the four IDX files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub no_augment: bool,
}

/// Preset or config file, then flag overrides, then validation.
pub fn resolve(common: &Common, default_preset: &str, args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let mut c = RunConfig::from_json(&text)?;
            if let Some(s) = common.seed {
                c.train_mut().seed = s;
            }
            c
        }
        (None, name) => preset(name.as_deref().unwrap_or(default_preset), common.seed.unwrap_or(0))?,
    };
    let t = cfg.train_mut();
    if let Some(v) = args.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.steps {
        t.steps_per_epoch = v;
    }
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.eval_size {
        t.eval_size = v;
    }
    if let Some(v) = common.threads {
        t.threads = Some(v);
    }
    if common.deterministic {
        t.deterministic = true;
        t.threads = Some(1);
    }
    if let RunConfig::Mnist(r) | RunConfig::Smnist(r) = &mut cfg {
        if args.train_limit.is_some() {
            r.train_limit = args.train_limit;
        }
        if let Some(v) = args.val_size {
            r.val_size = v;
        }
        if args.no_augment {
            r.augment.enabled = false;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_assert(common: &Common, cfg: &RunConfig, accuracy: f64, dir: &RunDir) -> bool {
    if !common.assert {
        return true;
    }
    match cfg.expect() {
        Some(e) if e.holds(accuracy) => {
            dir.log(&format!("assert: accuracy {accuracy:.4} meets {e:?}"));
            true
        }
        Some(e) => {
            dir.log(&format!("assert FAILED: accuracy {accuracy:.4} outside {e:?}"));
            false
        }
        None => {
            dir.log("assert: this configuration has no accuracy expectation");
            true
        }
    }
}

fn stamp(mut ck: Checkpoint, cfg: &RunConfig) -> Result<Checkpoint> {
    ck.config = serde_json::to_value(cfg)?;
    Ok(ck)
}

pub fn train_ih_cmd(common: &Common, args: &TrainArgs) -> Result<bool> {
    let cfg = resolve(common, "table1-coffee", args)?;
    let RunConfig::Ih(run) = &cfg else {
        bail!("train-ih needs an induction-head preset or config, got task '{}'", cfg.task());
    };
    let out = common.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    let dir = RunDir::create(&out, &cfg)?;
    let seed = run.train.seed;
    let opts = IhModelOptions {
        output_filter: run.output_filter,
        frozen_row: run.frozen_row,
        squared_distance: run.squared_distance,
    };
    let vocab = run.ih.vocab()?;
    let model = IhModel::init(run.model, vocab, run.d, run.n, opts, &mut RngState::derive(seed, INIT_TAG))?;
    dir.log(&format!(
        "train-ih {} model {} n={} D={} params {} trigger {:?} L_seq={} L_tri={} L_tar={} gap {:?}",
        run.preset.as_deref().unwrap_or("custom"),
        run.model,
        run.n,
        run.d,
        model.param_count(),
        run.ih.trigger,
        run.ih.l_seq,
        run.ih.l_tri,
        run.ih.l_tar,
        run.ih.l_noise_between,
    ));
    let mut on_row = |r: &MetricRow| dir.log_row(r);
    let outcome = train_ih(model, &run.ih, &run.train, &mut on_row)?;
    dir.finish(&outcome.metrics, &stamp(outcome.best, &cfg)?, &stamp(outcome.last, &cfg)?)?;
    dir.log(&format!(
        "done: {} epochs, {} sequences, best eval accuracy {:.4}; outputs in {}",
        outcome.epochs,
        outcome.samples_seen,
        outcome.best_accuracy,
        out.display()
    ));
    Ok(check_assert(common, &cfg, outcome.best_accuracy, &dir))
}

pub fn mnist_dir(data: Option<&Path>) -> Result<PathBuf> {
    if let Some(d) = data {
        return Ok(d.to_path_buf());
    }
    env::var_os(MNIST_ENV).map(PathBuf::from).ok_or_else(|| {
        anyhow!(
            "MNIST data not found: pass --data DIR or set {MNIST_ENV} to a directory holding \
             train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte and \
             t10k-labels-idx1-ubyte"
        )
    })
}

fn load_splits(run: &ImageRun, data: Option<&Path>) -> Result<MnistSplits> {
    let dir = mnist_dir(data)?;
    let mut splits = mnist_load_with(&dir, run.val_size, run.train.seed)?;
    if let Some(n) = run.train_limit {
        splits.train.truncate(n);
    }
    Ok(splits)
}

pub fn train_image_cmd(common: &Common, args: &TrainArgs, sequential: bool) -> Result<bool> {
    let cfg = resolve(common, if sequential { "smnist" } else { "table7-coffee" }, args)?;
    let run = match (&cfg, sequential) {
        (RunConfig::Mnist(r), false) | (RunConfig::Smnist(r), true) => r,
        _ => bail!(
            "{} needs a {} preset or config, got task '{}'",
            if sequential { "train-smnist" } else { "train-mnist" },
            if sequential { "smnist" } else { "mnist" },
            cfg.task()
        ),
    };
    // Fail on missing data before creating any output.
    let splits = load_splits(run, args.data.as_deref())?;
    let out = common.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    let dir = RunDir::create(&out, &cfg)?;
    let mut rng = RngState::derive(run.train.seed, INIT_TAG);
    dir.log(&format!(
        "{} {} model {:?} n={} filter {} train {} val {} test {}",
        cfg.task(),
        run.preset.as_deref().unwrap_or("custom"),
        run.model,
        run.n,
        run.output_filter,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ));
    let mut on_row = |r: &MetricRow| dir.log_row(r);
    let (metrics, best, last, test) = if sequential {
        let model = SmnistModel::init(run.model, run.n, &mut rng)?;
        dir.log(&format!("parameters {}", model.param_count()));
        let o = train_smnist(model, &splits, &run.augment, &run.train, &mut on_row)?;
        (o.metrics, o.best, o.last, o.test)
    } else {
        let kind = run.model.expect("validated");
        let model = MnistModel::init(kind, run.n, run.output_filter, &mut rng)?;
        dir.log(&format!("parameters {}", model.param_count()));
        let o = train_mnist(model, &splits, &run.augment, &run.train, &mut on_row)?;
        (o.metrics, o.best, o.last, o.test)
    };
    dir.finish(&metrics, &stamp(best, &cfg)?, &stamp(last, &cfg)?)?;
    let acc = match test {
        Some(t) => {
            dir.log(&format!("test loss {:.4} accuracy {:.4}; outputs in {}", t.loss, t.accuracy, out.display()));
            t.accuracy
        }
        None => {
            dir.log("no test split; nothing to assert on");
            0.0
        }
    };
    Ok(check_assert(common, &cfg, acc, &dir))
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint written by a training command.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Generated sequences for induction-head checkpoints.
    #[arg(long, default_value_t = 10_000)]
    pub eval_size: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn ih_task_of(ck: &Checkpoint) -> Result<IHConfig> {
    if let Ok(RunConfig::Ih(r)) = serde_json::from_value::<RunConfig>(ck.config.clone()) {
        return Ok(r.ih);
    }
    let task = ck.config.get("task").cloned().ok_or_else(|| anyhow!("checkpoint config has no task description"))?;
    Ok(serde_json::from_value(task)?)
}

fn print_eval(r: &EvalResult, what: &str) {
    println!("{what}: loss {:.6} accuracy {:.4}", r.loss, r.accuracy);
}

pub fn eval_cmd(common: &Common, args: &EvalArgs) -> Result<bool> {
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("cannot load {}", args.checkpoint.display()))?;
    let expect = serde_json::from_value::<RunConfig>(ck.config.clone()).ok().and_then(|c| c.expect());
    let accuracy = match ck.load_model()? {
        LoadedModel::Ih(m) if ck.task == "ih0" => {
            let acc = ih0_accuracy(&m.embedding.table)?;
            println!("ih0: accuracy {acc:.4} on the 8 sequences");
            acc
        }
        LoadedModel::Ih(m) => {
            let task = ih_task_of(&ck)?;
            let seed = common.seed.unwrap_or_else(|| ck.seeds.get("train").copied().unwrap_or(0));
            let mut rng = RngState::derive(seed ^ EVAL_SEED_XOR, EVAL_CMD_TAG);
            let set = gen_ih_batch(&task, &mut rng, args.eval_size)?;
            let r = evaluate_ih(&m, &set)?;
            print_eval(&r, &format!("ih ({} sequences)", args.eval_size));
            r.accuracy
        }
        LoadedModel::Mnist(m) => eval_images(&m, &ck, args)?,
        LoadedModel::Smnist(m) => eval_images(&m, &ck, args)?,
    };
    if common.assert {
        return Ok(match expect {
            Some(e) => {
                let ok = e.holds(accuracy);
                println!("assert: {} ({e:?})", if ok { "ok" } else { "FAILED" });
                ok
            }
            None => true,
        });
    }
    Ok(true)
}

fn eval_images<M: ImageModel>(m: &M, ck: &Checkpoint, args: &EvalArgs) -> Result<f64> {
    let (val_size, seed) = match serde_json::from_value::<RunConfig>(ck.config.clone()) {
        Ok(RunConfig::Mnist(r) | RunConfig::Smnist(r)) => (r.val_size, r.train.seed),
        _ => (coffee_core::tasks::mnist::VALIDATION_SIZE, 0),
    };
    let dir = mnist_dir(args.data.as_deref())?;
    let splits = mnist_load_with(&dir, val_size, seed)?;
    let test: Vec<_> = splits
        .test
        .iter()
        .map(|i| Ok((m.prepare(&i.pixels)?, usize::from(i.label))))
        .collect::<coffee_core::Result<_>>()?;
    let r = evaluate_images(m, &test)?;
    print_eval(&r, &format!("{} test ({} images)", M::TASK, test.len()));
    Ok(r.accuracy)
}
