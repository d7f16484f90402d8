//! Verification harnesses and small utilities.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};

use coffee_core::numerics::{init_normal, Matrix, RngState};
use coffee_core::parallel::{
    coffee_fixed_point_eval, diag_linear_scan, jacobian_diag_check, sequential_linear_recurrence,
};
use coffee_core::pipeline::{head_forward, predict_rows};
use coffee_core::ssm::{
    canonicalize, coffee_forward, count_mnist_params, count_params, count_smnist_params,
    CoffeeParams, CountOptions, EmbeddingCount, ExplicitInputCoffee, ModelKind, SsmLayer,
};
use coffee_core::tasks::ih::{gen_ih, validate_ih, IHConfig};
use coffee_core::tasks::ih0::{
    enumerate_ih0, ih0_embed, ih0_initial_embedding, ih0_learned_embedding, ih0_model, ih0_predict,
    ih0_trace,
};
use coffee_core::train::{
    grad_check_ih, grad_check_mnist, grad_check_smnist, ih0_train_model, ih_checkpoint,
    load_checkpoint, metrics_csv, save_checkpoint, train_ih0, AdamState, GradCheckDims,
    GradCheckReport, LoadedModel, MetricRow,
};

use crate::config::RunConfig;
use crate::presets::{preset, TRIGGER_TAG};
use crate::Common;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Head {
    /// Embedding, SSM layer and distance head.
    Ih,
    /// Four-view MNIST model with its affine/GELU head.
    Mnist,
    /// Sequential-pixel model.
    Smnist,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "coffee")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long = "D", default_value_t = 4)]
    pub d: usize,
    #[arg(long = "L", default_value_t = 8)]
    pub len: usize,
    /// Embedding rows.
    #[arg(long, default_value_t = 5)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub l_tar: usize,
    #[arg(long)]
    pub filter: bool,
    #[arg(long, value_enum, default_value = "ih")]
    pub head: Head,
}

pub fn gradcheck_cmd(common: &Common, a: &GradcheckArgs) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let report: GradCheckReport = match a.head {
        Head::Ih => {
            let dims = GradCheckDims {
                n: a.n,
                d: a.d,
                len: a.len,
                vocab: a.vocab,
                l_tar: a.l_tar.min(a.len),
                batch: a.batch,
            };
            grad_check_ih(a.model, &dims, a.filter, None, seed)?
        }
        Head::Mnist => grad_check_mnist(a.model, a.n, a.filter, seed)?,
        Head::Smnist => grad_check_smnist(Some(a.model), a.n, seed)?,
    };
    println!("{report}");
    Ok(report.passed())
}

#[derive(Args, Debug, Clone)]
pub struct Ih0TraceArgs {
    /// Comma-separated symbols from {1, 2, 3}.
    #[arg(long, default_value = "1,2,3,1")]
    pub seq: String,
    /// `learned`, `initial`, or a checkpoint path.
    #[arg(long, default_value = "learned")]
    pub embedding: String,
}

pub fn parse_symbols(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().with_context(|| format!("'{t}' is not a symbol")))
        .collect()
}

fn toy_embedding(spec: &str) -> Result<Matrix> {
    Ok(match spec {
        "learned" => ih0_learned_embedding(),
        "initial" => ih0_initial_embedding(),
        path => {
            let ck = load_checkpoint(path.as_ref())
                .with_context(|| format!("'{path}' is neither learned, initial nor a readable checkpoint"))?;
            match ck.load_model()? {
                LoadedModel::Ih(m) if m.embedding.table.shape() == (3, 2) => m.embedding.table,
                _ => bail!("{path} does not hold a 3 x 2 toy embedding"),
            }
        }
    })
}

pub fn ih0_trace_cmd(_common: &Common, a: &Ih0TraceArgs) -> Result<bool> {
    let emb = toy_embedding(&a.embedding)?;
    let tokens = parse_symbols(&a.seq)?;
    let states = ih0_trace(&emb, &tokens)?;
    for (k, (s, tok)) in states.iter().zip(&tokens).enumerate() {
        println!("k={} u={} x=({:.4}, {:.4})", k + 1, tok, s[0], s[1]);
    }
    println!("prediction {}", ih0_predict(&emb, &tokens)?);
    Ok(true)
}

#[derive(Args, Debug, Clone)]
pub struct Ih0TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
}

pub fn ih0_train_cmd(common: &Common, a: &Ih0TrainArgs) -> Result<bool> {
    let run = train_ih0(a.lr, a.max_steps)?;
    for &(step, loss, acc) in &run.history {
        if step % 10 == 0 || step == run.steps {
            println!("step {step:>5} loss {loss:.6} accuracy {acc:.3}");
        }
    }
    for (sym, r) in [1, 2, 3].iter().zip(0..3) {
        println!("embedding {sym}: ({:.4}, {:.4})", run.embedding[(r, 0)], run.embedding[(r, 1)]);
    }
    let acc = run.history.last().map_or(0.0, |h| h.2);
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        let mut model = ih0_train_model()?;
        model.embedding.table = run.embedding.clone();
        let rows: Vec<MetricRow> = run
            .history
            .iter()
            .map(|&(step, loss, accuracy)| MetricRow {
                epoch: 0,
                step: step as u64,
                split: "train".into(),
                loss,
                accuracy,
                lr: a.lr,
                wall_ms: 0,
            })
            .collect();
        let adam = AdamState::new(&model, a.lr);
        let config = serde_json::json!({ "lr": a.lr, "max_steps": a.max_steps });
        let ck = ih_checkpoint(&model, &adam, "ih0", config, &rows, 0);
        save_checkpoint(&ck, &dir.join(crate::rundir::LAST_CHECKPOINT))?;
        fs::write(dir.join(crate::rundir::METRICS_FILE), metrics_csv(&rows))?;
    }
    println!("{} steps, accuracy {acc:.3}", run.steps);
    Ok(!common.assert || acc >= 1.0)
}

#[derive(Args, Debug, Clone)]
pub struct CanonArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Embedding row that becomes all-ones.
    #[arg(long, default_value_t = 0)]
    pub pivot: usize,
    #[arg(long, default_value_t = 20)]
    pub sequences: usize,
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

pub fn canon_cmd(common: &Common, a: &CanonArgs) -> Result<bool> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let LoadedModel::Ih(model) = ck.load_model()? else {
        bail!("canon works on induction-head checkpoints");
    };
    let SsmLayer::Coffee(params) = &model.layer else {
        bail!("canon needs a COFFEE checkpoint, this one is {}", model.layer.kind());
    };
    let explicit = ExplicitInputCoffee { params: params.clone(), b: Matrix::filled(params.d(), params.n(), 1.0) };
    let (canon, table) = canonicalize(&explicit, &model.embedding, a.pivot)?;
    let mut rng = RngState::new(common.seed.unwrap_or(0));
    let m = model.embedding.vocab_size();
    let mut worst: f64 = 0.0;
    let (mut agree, mut total) = (0usize, 0usize);
    for _ in 0..a.sequences {
        let idx: Vec<usize> = (0..a.len).map(|_| rng.below(m)).collect();
        let before = explicit.forward(&model.embedding.lookup(&idx))?;
        let after = coffee_forward(&canon, &table.lookup(&idx))?;
        worst = worst.max(before.outputs.max_abs_diff(&after.outputs));
        let hb = head_forward(&before.outputs, &model.embedding.table, model.squared_distance)?;
        let ha = head_forward(&after.outputs, &table.table, model.squared_distance)?;
        agree += predict_rows(&hb.logits).iter().zip(predict_rows(&ha.logits)).filter(|(x, y)| **x == *y).count();
        total += a.len;
    }
    println!("max output difference over {} sequences: {worst:.3e} (tol {:.0e})", a.sequences, a.tol);
    // The head measures distances to the rescaled table, so its decisions
    // are not covered by the equivalence.
    println!("distance-head agreement against the rescaled table: {agree}/{total} positions");
    if let Some(path) = &common.out {
        let mut cm = model.clone();
        cm.layer = SsmLayer::Coffee(canon);
        cm.embedding = table;
        let adam = AdamState::new(&cm, 0.0);
        let mut out = ih_checkpoint(&cm, &adam, "ih", ck.config.clone(), &ck.metrics, 0);
        out.adam = None;
        out.seeds = ck.seeds.clone();
        save_checkpoint(&out, path)?;
        println!("canonical checkpoint written to {}", path.display());
    }
    Ok(worst <= a.tol)
}

#[derive(Args, Debug, Clone)]
pub struct ScanCheckArgs {
    #[arg(long, default_value_t = 4096)]
    pub max_len: usize,
    #[arg(long, default_value_t = 20)]
    pub models: usize,
}

fn random_coffee(rng: &mut RngState, d: usize, n: usize) -> CoffeeParams {
    let mut p = CoffeeParams::init(rng, d, n, false);
    p.lambda = Matrix::from_fn(d, n, |_, _| rng.uniform_range(-2.0, 0.0));
    p
}

pub fn scan_check_cmd(common: &Common, a: &ScanCheckArgs) -> Result<bool> {
    let mut rng = RngState::new(common.seed.unwrap_or(0));
    let mut ok = true;

    let mut scan_err: f64 = 0.0;
    let mut len = 1;
    while len <= a.max_len {
        let av: Vec<f64> = (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let x0 = rng.normal();
        let par = diag_linear_scan(&av, &bv, x0)?;
        let seq = sequential_linear_recurrence(&av, &bv, x0);
        scan_err = par.iter().zip(&seq).map(|(p, s)| (p - s).abs()).fold(scan_err, f64::max);
        len *= 2;
    }
    let pass = scan_err <= 1e-10;
    ok &= pass;
    println!("scan vs sequential, L <= {}: max err {scan_err:.3e} {}", a.max_len, verdict(pass));

    let (mut fp_err, mut iters, mut jac): (f64, usize, f64) = (0.0, 0, 0.0);
    for _ in 0..a.models {
        let (d, n, len) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(64));
        let p = random_coffee(&mut rng, d, n);
        let u = init_normal(&mut rng, len, d);
        let seq = coffee_forward(&p, &u)?;
        let (states, rep) = coffee_fixed_point_eval(&p, &u, 1e-12, 200)?;
        fp_err = fp_err.max(states.max_abs_diff(&seq.states));
        iters = iters.max(rep.iterations);
        for i in 0..d {
            let xp: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            jac = jac.max(jacobian_diag_check(&p, i, &xp, rng.normal())?);
        }
    }
    let mut toy_err: f64 = 0.0;
    for s in enumerate_ih0() {
        let u = ih0_embed(&ih0_learned_embedding(), &s.tokens)?;
        let seq = coffee_forward(&ih0_model(), &u)?;
        let (states, _) = coffee_fixed_point_eval(&ih0_model(), &u, 1e-12, 200)?;
        toy_err = toy_err.max(states.max_abs_diff(&seq.states));
    }
    let pass = fp_err <= 1e-6 && toy_err <= 1e-6;
    ok &= pass;
    println!(
        "fixed point vs sequential: {} random models max err {fp_err:.3e} (<= {iters} sweeps), toy inputs {toy_err:.3e} {}",
        a.models,
        verdict(pass)
    );
    let pass = jac < 1e-8;
    ok &= pass;
    println!("step Jacobian off-diagonal max {jac:.3e} {}", verdict(pass));
    Ok(ok)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenIhArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long)]
    pub l_seq: Option<usize>,
    #[arg(long)]
    pub l_tri: Option<usize>,
    #[arg(long)]
    pub l_tar: Option<usize>,
    /// Noise symbols between the first trigger and the target.
    #[arg(long)]
    pub gap: Option<usize>,
    /// Comma-separated trigger symbols (default: drawn from the seed).
    #[arg(long)]
    pub trigger: Option<String>,
    /// Check every sample and report violations on stderr.
    #[arg(long)]
    pub validate: bool,
}

fn gen_config(common: &Common, a: &GenIhArgs) -> Result<IHConfig> {
    let seed = common.seed.unwrap_or(0);
    let base = match &common.preset {
        Some(name) => match preset(name, seed)? {
            RunConfig::Ih(r) => r.ih,
            other => bail!("preset '{name}' is a {} preset, gen-ih needs an induction-head one", other.task()),
        },
        None => IHConfig::standard(16, 1, 1, &mut RngState::derive(seed, TRIGGER_TAG))?,
    };
    let (l_seq, l_tri, l_tar) =
        (a.l_seq.unwrap_or(base.l_seq), a.l_tri.unwrap_or(base.l_tri), a.l_tar.unwrap_or(base.l_tar));
    let mut cfg = if l_tri != base.l_tri {
        IHConfig::standard(l_seq, l_tri, l_tar, &mut RngState::derive(seed, TRIGGER_TAG))?
    } else {
        IHConfig { l_seq, l_tar, ..base }
    };
    if let Some(t) = &a.trigger {
        cfg.trigger = parse_symbols(t)?;
        cfg.l_tri = cfg.trigger.len();
    }
    if a.gap.is_some() {
        cfg.l_noise_between = a.gap;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_ih_cmd(common: &Common, a: &GenIhArgs) -> Result<bool> {
    let cfg = gen_config(common, a)?;
    let mut rng = RngState::new(common.seed.unwrap_or(0));
    let sink: Box<dyn Write> = match &common.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    let mut bad = 0usize;
    for _ in 0..a.count {
        let s = gen_ih(&cfg, &mut rng)?;
        if a.validate && !validate_ih(&s, &cfg).is_valid() {
            bad += 1;
        }
        writeln!(w, "{}", s.to_line())?;
    }
    w.flush()?;
    if a.validate {
        eprintln!("{} samples, {bad} invalid", a.count);
    }
    Ok(bad == 0)
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CountTask {
    Ih,
    Mnist,
    Smnist,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CountEmbedding {
    None,
    Full,
    Canonical,
}

#[derive(Args, Debug, Clone)]
pub struct CountArgs {
    #[arg(long, value_enum)]
    pub task: Option<CountTask>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "D")]
    pub d: Option<usize>,
    /// Embedding rows `|M|`.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub filter: bool,
    #[arg(long, value_enum, default_value = "full")]
    pub embedding: CountEmbedding,
    /// Omit the SSM layer (sequential MNIST).
    #[arg(long)]
    pub no_ssm: bool,
}

pub fn count_cmd(common: &Common, a: &CountArgs) -> Result<bool> {
    let count = if let Some(name) = &common.preset {
        match preset(name, common.seed.unwrap_or(0))? {
            RunConfig::Ih(r) => {
                let m = r.ih.vocab()?.len();
                let embedding =
                    if r.frozen_row.is_some() { EmbeddingCount::Canonical } else { EmbeddingCount::Full };
                count_params(r.model, r.n, r.d, m, CountOptions { output_filter: r.output_filter, embedding })
            }
            RunConfig::Mnist(r) => count_mnist_params(r.model.expect("validated"), r.n, r.output_filter),
            RunConfig::Smnist(r) => match r.model {
                Some(k) => count_smnist_params(k, r.n, true),
                None => count_smnist_params(ModelKind::Coffee, 0, false),
            },
        }
    } else {
        let need = |v: Option<usize>, flag: &str| v.ok_or_else(|| anyhow!("--{flag} is required without --preset"));
        let kind = a.model.unwrap_or(ModelKind::Coffee);
        match a.task.unwrap_or(CountTask::Ih) {
            CountTask::Ih => {
                let embedding = match a.embedding {
                    CountEmbedding::None => EmbeddingCount::None,
                    CountEmbedding::Full => EmbeddingCount::Full,
                    CountEmbedding::Canonical => EmbeddingCount::Canonical,
                };
                count_params(
                    kind,
                    need(a.n, "n")?,
                    need(a.d, "D")?,
                    a.vocab.unwrap_or(8),
                    CountOptions { output_filter: a.filter, embedding },
                )
            }
            CountTask::Mnist => count_mnist_params(kind, need(a.n, "n")?, a.filter),
            CountTask::Smnist => count_smnist_params(kind, a.n.unwrap_or(0), !a.no_ssm),
        }
    };
    println!("{count}");
    Ok(true)
}

