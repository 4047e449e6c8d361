use std::path::Path;
use std::process::{Command, Output};

use encap_core::data::{synth_generate, to_idx, SyntheticSpec};
use encap_core::gradsuite::toy_network;
use encap_core::train::{MetricsRow, RunConfig, TrainConfig};

fn encapnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encapnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn param_count_reports_the_reference_complexity() {
    let out = stdout(&encapnet(&[
        "param-count",
        "--config",
        configs().join("six_layer_encapnet.toml").to_str().unwrap(),
    ]));
    assert!(out.contains("depth 6"), "{out}");
    assert!(out.contains("1048576"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("total")));
}

#[test]
fn ot_bench_prints_one_row_per_trial() {
    let out = stdout(&encapnet(&["ot-bench", "--n", "3", "--trials", "4", "--seed", "2"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "trial,sinkhorn,exact,abs_diff,max_row_dev,max_col_dev");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(f[0] >= f[1] - 1e-9, "{l}");
    }
    assert!(!encapnet(&["ot-bench", "--n", "7"]).status.success());
}

#[test]
fn gradcheck_single_module() {
    let out = stdout(&encapnet(&["gradcheck", "--module", "squash"]));
    assert!(out.starts_with("squash") && out.trim_end().ends_with("ok"), "{out}");
    assert!(!encapnet(&["gradcheck", "--module", "nope"]).status.success());
}

#[test]
fn train_then_eval_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (split, seed) in [("train", 1), ("test", 2)] {
        let ds = synth_generate(&SyntheticSpec {
            classes: 3,
            per_class: 4,
            size: 16,
            noise: 0.05,
            seed,
        })
        .unwrap();
        let (img, lbl) = to_idx(&ds);
        std::fs::write(d.join(format!("{split}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(d.join(format!("{split}-labels-idx1-ubyte")), lbl).unwrap();
    }
    let run = RunConfig {
        network: toy_network(),
        train: TrainConfig {
            lr: 1e-3,
            milestones: vec![],
            max_epoch: 2,
            batch_size: 4,
            augment: false,
            pad_to: 0,
            ..TrainConfig::default()
        },
    };
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, run.to_toml()).unwrap();
    let (metrics, ckpt) = (d.join("m.csv"), d.join("ckpt"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let out = stdout(&encapnet(&[
        "train",
        "--config",
        &s(&cfg),
        "--data-dir",
        &s(d),
        "--metrics-out",
        &s(&metrics),
        "--out-dir",
        &s(&ckpt),
        "--lambda",
        "1",
        "--dtype",
        "f64",
    ]));
    assert!(out.contains("best test error"), "{out}");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().next(), Some(MetricsRow::HEADER));
    // Epoch 0 plus two epochs, train and test each.
    assert_eq!(csv.lines().count(), 1 + 6);
    let last = MetricsRow::parse(csv.lines().last().unwrap()).unwrap();
    let out = stdout(&encapnet(&["eval", "--checkpoint", &s(&ckpt.join("last.ckpt")), "--data-dir", &s(d)]));
    assert!(out.starts_with(&format!("test error {:.4}", last.error)), "{out} vs {last:?}");
}
