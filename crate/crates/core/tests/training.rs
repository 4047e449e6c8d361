use encap_autodiff::{Graph, Tensor};
use encap_core::data::{synth_generate, Dataset, SyntheticSpec};
use encap_core::gradsuite::toy_network;
use encap_core::model::{count_inference_params, count_params, Body, Family, Network, NetworkConfig, VanillaLayer};
use encap_core::params::{Ctx, ParamStore};
use encap_core::train::{evaluate, load_checkpoint, MetricsRow, RunConfig, TrainConfig, Trainer};
use encap_core::Error;

fn toy_data(per_class: usize, seed: u64) -> Dataset {
    synth_generate(&SyntheticSpec {
        classes: 3,
        per_class,
        size: 16,
        noise: 0.05,
        seed,
    })
    .unwrap()
}

fn toy_run(lambda: f64, lr: f64, epochs: usize, batch_size: usize) -> RunConfig {
    RunConfig {
        network: toy_network(),
        train: TrainConfig {
            lr,
            milestones: vec![],
            max_epoch: epochs,
            batch_size,
            lambda,
            seed: 3,
            augment: false,
            pad_to: 0,
            ..TrainConfig::default()
        },
    }
}

fn run_rows(run: RunConfig) -> (Vec<MetricsRow>, String) {
    let (train, test) = (toy_data(8, 1), toy_data(4, 2));
    let mut t = Trainer::<f64>::new(run).unwrap();
    let mut csv = Vec::new();
    let summary = t.run(&train, &test, Some(&mut csv), None, |_, _| Ok(())).unwrap();
    (summary.rows, String::from_utf8(csv).unwrap())
}

#[test]
fn preset_depths() {
    let mut store = ParamStore::<f32>::new(0);
    assert_eq!(Network::build(&NetworkConfig::encapnet_v1(3, 10), &mut store).unwrap().depth(), 18);
    for n in 0..4 {
        let mut store = ParamStore::<f32>::new(0);
        assert_eq!(Network::build(&NetworkConfig::encapnet_v1(n, 10), &mut store).unwrap().depth(), 2 + 4 * (n + 1));
        let mut store = ParamStore::<f32>::new(0);
        assert_eq!(
            Network::build(&NetworkConfig::resnet(n.max(1), 10), &mut store).unwrap().depth(),
            2 + 8 * n.max(1)
        );
    }
}

#[test]
fn six_layer_networks_emit_ten_class_capsules() {
    for family in [Family::Encapnet, Family::CapnetDynamic, Family::CapnetEm] {
        let cfg = NetworkConfig::six_layer(family);
        let mut store = ParamStore::<f32>::new(0);
        let net = Network::build(&cfg, &mut store).unwrap();
        assert_eq!(net.depth(), 6, "{family:?}");
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 1, 32, 32]));
        let out = net.forward(&mut Ctx::frozen(&mut g, &mut store, false), x, false).unwrap();
        assert_eq!(g.shape(out.classes), &[2, 10, 16]);
    }
}

#[test]
fn vanilla_baseline_keeps_the_capsule_blob_shapes() {
    let caps = NetworkConfig::six_layer(Family::Encapnet);
    let plain = NetworkConfig::six_layer(Family::VanillaCnn);
    assert_eq!(caps.stem_output().unwrap(), plain.stem_output().unwrap());
    let mut store = ParamStore::<f32>::new(0);
    let net = Network::build(&plain, &mut store).unwrap();
    let Body::Vanilla { stages, .. } = &net.body else { panic!("not a CNN") };
    let VanillaLayer::Plain(stage) = &stages[0] else { panic!("residual stage") };
    let m = &caps.modules[0];
    // Module output: 4 capsule channels × 16 dims at stride 2, same as the conv stage.
    assert_eq!(store.value(stage.conv.w).shape()[0], m.channels * m.out_dim);
    assert_eq!(stage.conv.cfg.stride, m.stride);
    assert_eq!(net.depth(), 6);
}

#[test]
fn inconsistent_modules_are_config_errors() {
    let mut cfg = toy_network();
    cfg.modules[1].in_dim = 3;
    let mut store = ParamStore::<f64>::new(0);
    assert!(matches!(Network::build(&cfg, &mut store), Err(Error::Config(_))));
}

#[test]
fn counts_on_empty_and_built_stores() {
    let empty = ParamStore::<f32>::new(0);
    assert!(count_params(&empty).is_empty());
    assert_eq!(empty.count_trainable(), 0);
    let mut store = ParamStore::<f32>::new(0);
    Network::build(&toy_network(), &mut store).unwrap();
    let groups = count_params(&store);
    assert_eq!(groups.values().sum::<usize>(), store.count_trainable());
    let ot: usize = store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.contains(".ot_"))
        .map(|(_, p)| p.value.len())
        .sum();
    assert!(ot > 0);
    assert_eq!(count_inference_params(&store) + ot, store.count_trainable());
}

#[test]
fn zero_learning_rate_repeats_the_loss() {
    // One full-dataset batch per epoch: only the summation order changes.
    let (rows, _) = run_rows(toy_run(0.0, 0.0, 3, 64));
    let train: Vec<f64> = rows.iter().filter(|r| r.split == "train" && r.epoch > 0).map(|r| r.loss).collect();
    assert_eq!(train.len(), 3);
    for l in &train {
        assert!((l - train[0]).abs() <= 1e-12 * train[0].abs(), "{train:?}");
    }
}

#[test]
fn feedback_columns_follow_lambda() {
    let (rows, csv) = run_rows(toy_run(0.0, 1e-3, 1, 8));
    assert!(rows.iter().all(|r| r.ot.iter().all(Option::is_none)));
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(5) == Some("")));

    let (rows, csv) = run_rows(toy_run(10.0, 1e-3, 1, 8));
    assert_eq!(csv.lines().next(), Some(MetricsRow::HEADER));
    for r in rows.iter().filter(|r| r.split == "train") {
        assert!(r.ot[0].is_some() && r.ot[1].is_some() && r.ot[2].is_none());
    }
    // The test split never runs the feedback units.
    assert!(rows.iter().filter(|r| r.split == "test").all(|r| r.ot.iter().all(Option::is_none)));
    for line in csv.lines().skip(1) {
        let r = MetricsRow::parse(line).unwrap();
        let offline = r.margin + 10.0 * r.ot.iter().flatten().sum::<f64>();
        assert!((r.loss - offline).abs() <= 1e-9, "{line}");
        assert!(r.loss.is_finite());
    }
}

#[test]
fn seed_identical_runs_repeat_bit_for_bit() {
    let (a, _) = run_rows(toy_run(10.0, 1e-3, 2, 8));
    let (b, _) = run_rows(toy_run(10.0, 1e-3, 2, 8));
    let strip = |r: &MetricsRow| MetricsRow { wallclock: 0.0, ..r.clone() }.to_csv();
    assert_eq!(a.iter().map(strip).collect::<Vec<_>>(), b.iter().map(strip).collect::<Vec<_>>());
    assert_eq!(a[0].to_csv(), b[0].to_csv());
    assert_eq!(a[0].wallclock, 0.0);
}

#[test]
fn evaluation_is_pure() {
    let mut t = Trainer::<f64>::new(toy_run(10.0, 1e-3, 1, 8)).unwrap();
    let ds = toy_data(4, 5);
    t.train_epoch(&toy_data(4, 6), 0).unwrap();
    let before = t.store.clone();
    let a = evaluate(&t.net, &mut t.store, &ds, 5, 0, true).unwrap();
    let b = evaluate(&t.net, &mut t.store, &ds, 5, 0, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples, 12);
    assert!((a.error() + (a.samples - a.errors) as f64 / a.samples as f64 - 1.0).abs() == 0.0);
    for id in before.ids() {
        assert_eq!(before.value(id), t.store.value(id));
    }
}

#[test]
fn silent_head_predicts_one_class() {
    let mut run = toy_run(0.0, 1e-3, 1, 8);
    run.network.classes = 10;
    let mut t = Trainer::<f64>::new(run).unwrap();
    let Body::Encap { head, .. } = &t.net.body else { panic!("not an EncapNet") };
    t.store.value_mut(head.w).data_mut().fill(0.0);
    let ds = synth_generate(&SyntheticSpec {
        classes: 10,
        per_class: 3,
        size: 16,
        noise: 0.0,
        seed: 0,
    })
    .unwrap();
    let s = evaluate(&t.net, &mut t.store, &ds, 7, 0, false).unwrap();
    assert_eq!(s.errors, 27);
    assert!((s.error() - 0.9).abs() < 1e-15);
}

#[test]
fn overflowing_weights_abort_with_the_op() {
    let mut t = Trainer::<f64>::new(toy_run(0.0, 1e-3, 1, 8)).unwrap();
    let w = t.net.stem[0].conv.w;
    t.store.value_mut(w).data_mut().fill(f64::MAX);
    match t.train_epoch(&toy_data(4, 1), 0) {
        Err(Error::Diverged { stage, op, .. }) => assert_eq!((stage, op), ("forward", "conv2d")),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoints_restore_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (toy_data(8, 1), toy_data(4, 2));
    let mut t = Trainer::<f64>::new(toy_run(10.0, 1e-3, 2, 8)).unwrap();
    let summary = t.run(&train, &test, None, Some(dir.path()), |_, _| Ok(())).unwrap();
    let mut last = load_checkpoint::<f64>(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.run, t.run);
    for id in t.store.ids() {
        assert_eq!(t.store.value(id), last.store.value(id));
    }
    let s = evaluate(&last.net, &mut last.store, &test, 8, 0, false).unwrap();
    assert_eq!(s.error(), summary.rows.last().unwrap().error);
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn run_config_errors() {
    let good = toy_run(1.0, 1e-3, 1, 8).to_toml();
    assert!(RunConfig::from_toml(&good).is_ok());
    assert!(matches!(RunConfig::from_toml(&format!("{good}\n[extra]\nx = 1\n")), Err(Error::Toml(_))));
    let bad = |f: fn(&mut TrainConfig)| {
        let mut r = toy_run(1.0, 1e-3, 1, 8);
        f(&mut r.train);
        Trainer::<f64>::new(r).is_err()
    };
    assert!(bad(|t| t.lambda = -1.0));
    assert!(bad(|t| t.batch_size = 0));
}
