use coffee_core::numerics::{Matrix, RngState};
use coffee_core::ssm::{ModelKind, SsmLayer, LAMBDA_MAX, LAMBDA_MIN};
use coffee_core::tasks::ih::IHConfig;
use coffee_core::tasks::ih0::ih0_accuracy;
use coffee_core::tasks::mnist::{
    AugmentConfig, LabeledImage, MnistModel, MnistSplits, SmnistModel, MNIST_SIDE,
};
use coffee_core::train::{
    load_checkpoint, lr_schedule, metrics_csv, save_checkpoint, train_ih, train_ih0, train_mnist,
    train_smnist, AdamState, Gradients, IhModel, IhModelOptions, Learnable, LoadedModel, LrDrop,
    LrSchedule, TrainConfig, TrainOutcome,
};

fn tiny_task(seed: u64) -> IHConfig {
    IHConfig::standard(8, 1, 1, &mut RngState::derive(seed, 1)).unwrap()
}

fn tiny_model(kind: ModelKind, task: &IHConfig, options: IhModelOptions, seed: u64) -> IhModel {
    IhModel::init(kind, task.vocab().unwrap(), 8, 3, options, &mut RngState::derive(seed, 2)).unwrap()
}

fn tiny_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        steps_per_epoch: 40,
        max_epochs: 2,
        eval_size: 256,
        seed,
        early_stop_accuracy: None,
        deterministic: true,
        threads: Some(1),
        ..TrainConfig::default()
    }
}

fn run_tiny(kind: ModelKind, options: IhModelOptions, cfg: &TrainConfig) -> TrainOutcome<IhModel> {
    let task = tiny_task(cfg.seed);
    let model = tiny_model(kind, &task, options, cfg.seed);
    train_ih(model, &task, cfg, &mut |_| {}).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn ih0_embedding_training_reaches_full_accuracy() {
    let run = train_ih0(0.01, 2000).unwrap();
    let (_, _, acc) = *run.history.last().unwrap();
    assert_eq!(acc, 1.0);
    assert_eq!(ih0_accuracy(&run.embedding).unwrap(), 1.0);
    assert!(run.history[0].2 < 1.0, "the starting point should not already solve the task");
}

#[test]
fn training_loss_decreases() {
    for kind in [ModelKind::Coffee, ModelKind::S6, ModelKind::Linearized] {
        let out = run_tiny(kind, IhModelOptions::default(), &TrainConfig { lr: 0.02, ..tiny_cfg(5) });
        let l = &out.step_losses;
        assert_eq!(l.len(), 80);
        let (head, tail) = (mean(&l[..15]), mean(&l[l.len() - 15..]));
        assert!(tail < head, "{kind}: loss {head} -> {tail}");
    }
}

#[test]
fn runs_are_reproducible_and_thread_independent() {
    let a = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &tiny_cfg(9));
    let b = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &tiny_cfg(9));
    let c = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &TrainConfig { threads: Some(3), ..tiny_cfg(9) });
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.model, b.model);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&c.metrics));
    assert_eq!(a.model, c.model);
    assert!(a.metrics.iter().all(|r| r.wall_ms == 0));
}

#[test]
fn different_seeds_differ() {
    let a = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &tiny_cfg(1));
    let b = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &tiny_cfg(2));
    assert_ne!(a.step_losses, b.step_losses);
}

#[test]
fn lambda_stays_in_range_and_frozen_row_is_kept() {
    let options = IhModelOptions { frozen_row: Some(0), output_filter: true, ..IhModelOptions::default() };
    let out = run_tiny(ModelKind::Coffee, options, &TrainConfig { lr: 0.2, ..tiny_cfg(4) });
    let SsmLayer::Coffee(p) = &out.model.layer else { unreachable!() };
    assert!(p.lambda.as_slice().iter().all(|&l| (LAMBDA_MIN..=LAMBDA_MAX).contains(&l)));
    assert!(out.model.embedding.table.row(0).iter().all(|&v| v == 1.0));
    assert!(out.model.embedding.table.row(1).iter().any(|&v| v != 1.0));
}

#[test]
fn best_checkpoint_tracks_the_best_evaluation() {
    let out = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &TrainConfig { max_epochs: 4, ..tiny_cfg(6) });
    let evals: Vec<f64> = out.metrics.iter().filter(|r| r.split == "eval").map(|r| r.accuracy).collect();
    assert_eq!(evals.len(), 4);
    assert_eq!(out.best_accuracy, evals.iter().copied().fold(f64::MIN, f64::max));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.json");
    save_checkpoint(&out.best, &path).unwrap();
    let LoadedModel::Ih(restored) = load_checkpoint(&path).unwrap().load_model().unwrap() else {
        panic!("expected an induction-head model");
    };
    assert_eq!(restored, out.best_model);
    let LoadedModel::Ih(last) = out.last.load_model().unwrap() else { unreachable!() };
    assert_eq!(last, out.model);
}

#[test]
fn early_stop_ends_the_run() {
    let cfg = TrainConfig { early_stop_accuracy: Some(0.0), max_epochs: 5, ..tiny_cfg(3) };
    let out = run_tiny(ModelKind::Coffee, IhModelOptions::default(), &cfg);
    assert_eq!(out.epochs, 1);
}

#[test]
fn invalid_config_rejected() {
    let task = tiny_task(0);
    let model = tiny_model(ModelKind::Coffee, &task, IhModelOptions::default(), 0);
    let cfg = TrainConfig { batch_size: 0, ..tiny_cfg(0) };
    assert!(train_ih(model, &task, &cfg, &mut |_| {}).is_err());
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let task = tiny_task(0);
    let mut model = tiny_model(ModelKind::S6, &task, IhModelOptions::default(), 0);
    let before = model.clone();
    let mut adam = AdamState::new(&model, 0.01);
    let g = Gradients::zeros_like(&model);
    for _ in 0..5 {
        adam.step(&mut model, &g).unwrap();
    }
    assert_eq!(model, before);
}

#[test]
fn adam_moves_against_the_gradient() {
    let task = tiny_task(0);
    let mut model = tiny_model(ModelKind::S6, &task, IhModelOptions::default(), 0);
    let before = model.clone();
    let mut adam = AdamState::new(&model, 0.01);
    let mut g = Gradients::zeros_like(&model);
    for v in &mut g.values {
        v.fill(3.0);
    }
    adam.step(&mut model, &g).unwrap();
    for ((_, a), (_, b)) in model.tensors().iter().zip(before.tensors()) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            // The first bias-corrected step has magnitude lr.
            assert!((y - x - 0.01).abs() < 1e-8, "{y} -> {x}");
        }
    }
}

#[test]
fn adam_projects_lambda() {
    let task = tiny_task(0);
    let mut model = tiny_model(ModelKind::Coffee, &task, IhModelOptions::default(), 0);
    let mut adam = AdamState::new(&model, 5.0);
    let mut g = Gradients::zeros_like(&model);
    let k = g.names.iter().position(|n| n.ends_with("lambda")).unwrap();
    g.values[k].fill(-1.0);
    adam.step(&mut model, &g).unwrap();
    let SsmLayer::Coffee(p) = &model.layer else { unreachable!() };
    assert!(p.lambda.as_slice().iter().all(|&l| l == LAMBDA_MAX));
    g.values[k].fill(1.0);
    for _ in 0..3 {
        adam.step(&mut model, &g).unwrap();
    }
    let SsmLayer::Coffee(p) = &model.layer else { unreachable!() };
    assert!(p.lambda.as_slice().iter().all(|&l| l == LAMBDA_MIN));
}

#[test]
fn learning_rate_drop_latches() {
    let drop = Some(LrDrop { threshold: 0.45, lr: 0.005 });
    assert_eq!(lr_schedule(0.01, drop, &[0.5]), 0.01);
    assert_eq!(lr_schedule(0.01, drop, &[0.45]), 0.01);
    assert_eq!(lr_schedule(0.01, drop, &[0.44]), 0.005);
    assert_eq!(lr_schedule(0.01, drop, &[0.44, 0.6]), 0.005);
    assert_eq!(lr_schedule(0.01, None, &[0.0]), 0.01);
    let mut s = LrSchedule::new(0.01, drop);
    assert_eq!(s.observe(1.0), 0.01);
    assert_eq!(s.observe(0.1), 0.005);
    assert!(s.dropped);
}

/// Two-class stroke images: class 0 has a horizontal bar, class 1 a vertical one.
fn stroke_images(count: usize, rng: &mut RngState) -> Vec<LabeledImage> {
    (0..count)
        .map(|k| {
            let label = (k % 2) as u8;
            let at = 8 + rng.below(12);
            let pixels = Matrix::from_fn(MNIST_SIDE, MNIST_SIDE, |r, c| {
                let on = if label == 0 { r.abs_diff(at) <= 1 } else { c.abs_diff(at) <= 1 };
                if on {
                    0.9
                } else {
                    0.1 * rng.uniform()
                }
            });
            LabeledImage { pixels, label }
        })
        .collect()
}

fn stroke_splits() -> MnistSplits {
    let mut rng = RngState::new(31);
    MnistSplits { train: stroke_images(96, &mut rng), val: stroke_images(32, &mut rng), test: stroke_images(32, &mut rng) }
}

fn image_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        lr: 0.01,
        seed: 2,
        early_stop_accuracy: None,
        deterministic: true,
        threads: Some(1),
        ..TrainConfig::default()
    }
}

#[test]
fn four_view_model_learns_strokes() {
    let data = stroke_splits();
    let model = MnistModel::init(ModelKind::Coffee, 2, false, &mut RngState::new(3)).unwrap();
    let out = train_mnist(model, &data, &AugmentConfig::default(), &image_cfg(), &mut |_| {}).unwrap();
    let test = out.test.expect("test split was given");
    assert!(test.accuracy >= 0.9, "test accuracy {}", test.accuracy);
    let splits: Vec<&str> = out.metrics.iter().map(|r| r.split.as_str()).collect();
    assert_eq!(splits, ["train", "val", "train", "val", "train", "val", "test"]);
    assert_eq!(out.samples_seen, 3 * 96);

    let again = MnistModel::init(ModelKind::Coffee, 2, false, &mut RngState::new(3)).unwrap();
    let rerun = train_mnist(again, &data, &AugmentConfig::default(), &image_cfg(), &mut |_| {}).unwrap();
    assert_eq!(metrics_csv(&out.metrics), metrics_csv(&rerun.metrics));
    let LoadedModel::Mnist(best) = out.best.load_model().unwrap() else { panic!("expected MNIST") };
    assert_eq!(best, out.best_model);
}

#[test]
fn sequential_model_trains_and_round_trips() {
    let data = stroke_splits();
    let model = SmnistModel::init(Some(ModelKind::Coffee), 2, &mut RngState::new(4)).unwrap();
    let cfg = TrainConfig { max_epochs: 1, ..image_cfg() };
    let out = train_smnist(model, &data, &AugmentConfig::default(), &cfg, &mut |_| {}).unwrap();
    assert!(out.step_losses.iter().all(|l| l.is_finite()));
    let LoadedModel::Smnist(last) = out.last.load_model().unwrap() else { panic!("expected sMNIST") };
    assert_eq!(last, out.model);
}
