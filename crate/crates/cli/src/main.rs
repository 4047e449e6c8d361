use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use encap_autodiff::{DType, Real};
use encap_core::checkpoint;
use encap_core::data::load_split;
use encap_core::gradsuite;
use encap_core::model::{count_inference_params, count_params, ComplexityReport, Network};
use encap_core::params::ParamStore;
use encap_core::routing::{polarized_mass, write_histogram_csv};
use encap_core::sinkhorn::{brute_force_ot, sinkhorn, BRUTE_FORCE_MAX};
use encap_core::train::{evaluate, load_checkpoint, polarization, RunConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "encapnet", version, about = "Train and inspect capsule networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network described by a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "data/mnist-10k")]
        data_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplies the epoch budget and every lr milestone.
        #[arg(long)]
        scale: Option<f64>,
        /// Feedback weight, overriding the config.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Directory for best.ckpt and last.ckpt.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: Precision,
    },
    /// Test error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/mnist-10k")]
        data_dir: PathBuf,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        /// One of the check names; all of them when omitted.
        #[arg(long)]
        module: Option<String>,
    },
    /// Sinkhorn against the exact assignment on random costs.
    OtBench {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts of a network config.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cosine histogram of the last routing layer of a CapNet checkpoint.
    RoutingHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data/mnist-10k")]
        data_dir: PathBuf,
        /// Test images in the snapshot batch.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ENCAP_THREADS") {
        let n: usize = v.parse().with_context(|| format!("ENCAP_THREADS={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            data_dir,
            seed,
            scale,
            lambda,
            metrics_out,
            out_dir,
            dtype,
        } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            if let Some(s) = scale {
                run.train.scale = s;
            }
            if let Some(l) = lambda {
                run.train.lambda = l;
            }
            run.train.validate()?;
            match dtype {
                Precision::F32 => train::<f32>(run, &data_dir, metrics_out.as_deref(), out_dir.as_deref()),
                Precision::F64 => train::<f64>(run, &data_dir, metrics_out.as_deref(), out_dir.as_deref()),
            }
        }
        Cmd::Eval { checkpoint, data_dir } => match checkpoint::peek_dtype(&checkpoint)? {
            DType::F32 => eval::<f32>(&checkpoint, &data_dir),
            DType::F64 => eval::<f64>(&checkpoint, &data_dir),
        },
        Cmd::Gradcheck { module } => gradcheck(module.as_deref()),
        Cmd::OtBench { n, eps, iters, trials, seed } => ot_bench(n, eps, iters, trials, seed),
        Cmd::ParamCount { config } => param_count(&config),
        Cmd::RoutingHist {
            checkpoint,
            out,
            data_dir,
            samples,
        } => match checkpoint::peek_dtype(&checkpoint)? {
            DType::F32 => routing_hist::<f32>(&checkpoint, &out, &data_dir, samples),
            DType::F64 => routing_hist::<f64>(&checkpoint, &out, &data_dir, samples),
        },
    }
}

fn train<F: Real>(run: RunConfig, data_dir: &Path, metrics_out: Option<&Path>, out_dir: Option<&Path>) -> Result<()> {
    let train = load_split(data_dir, "train")?;
    let test = load_split(data_dir, "test")?;
    log::info!("{} train / {} test samples, {} epochs", train.len(), test.len(), run.train.epochs());
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut sink = match metrics_out {
        Some(p) => Some(LineWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let mut trainer = Trainer::<F>::new(run)?;
    log::info!("{} trainable parameters, depth {}", trainer.store.count_trainable(), trainer.net.depth());
    let summary = trainer.run(&train, &test, sink.as_mut().map(|w| w as &mut dyn Write), out_dir, |_, _| Ok(()))?;
    println!("best test error {:.4} at epoch {}", summary.best_test_error, summary.best_epoch);
    Ok(())
}

fn eval<F: Real>(path: &Path, data_dir: &Path) -> Result<()> {
    let mut t = load_checkpoint::<F>(path)?;
    let test = load_split(data_dir, "test")?;
    let s = evaluate(&t.net, &mut t.store, &test, t.run.train.batch_size, t.run.train.pad_to, false)?;
    println!("test error {:.4} ({} of {}), margin loss {:.6}", s.error(), s.errors, s.samples, s.margin);
    Ok(())
}

fn gradcheck(module: Option<&str>) -> Result<()> {
    let entries = match module {
        Some(m) => vec![gradsuite::run(m)?],
        None => gradsuite::run_all()?,
    };
    let mut failed = 0;
    for e in &entries {
        println!(
            "{:<10} {:>4} probes  rel_err {:.3e}  {}",
            e.name,
            e.probes,
            e.rel_err,
            if e.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!e.passed());
    }
    if failed > 0 {
        bail!("{failed} gradient checks above tolerance {:e}", gradsuite::TOLERANCE);
    }
    Ok(())
}

fn ot_bench(n: usize, eps: f64, iters: usize, trials: usize, seed: u64) -> Result<()> {
    if n > BRUTE_FORCE_MAX {
        bail!("--n {n} exceeds the brute-force limit {BRUTE_FORCE_MAX}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    println!("trial,sinkhorn,exact,abs_diff,max_row_dev,max_col_dev");
    for t in 0..trials {
        let q: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let c = sinkhorn(&q, n, n, eps, iters)?;
        let exact = brute_force_ot(&q, n)?;
        let target = 1.0 / n as f64;
        let dev = |v: Vec<f64>| v.iter().map(|x| (x - target).abs()).fold(0.0, f64::max);
        let ot = c.cost(&q);
        println!(
            "{t},{ot:.6},{exact:.6},{:.3e},{:.3e},{:.3e}",
            (ot - exact).abs(),
            dev(c.row_sums()),
            dev(c.col_sums())
        );
    }
    Ok(())
}

fn param_count(path: &Path) -> Result<()> {
    let run = RunConfig::load(path)?;
    let mut store = ParamStore::<f32>::new(0);
    let net = Network::build(&run.network, &mut store)?;
    println!("family {:?}, depth {}", run.network.family, net.depth());
    for (group, n) in count_params(&store) {
        println!("{group:<12} {n}");
    }
    println!("total        {}", store.count_trainable());
    println!("inference    {}", count_inference_params(&store));
    println!();
    for (k, v) in ComplexityReport::reference().rows() {
        println!("{k:<24} {v}");
    }
    Ok(())
}

fn routing_hist<F: Real>(path: &Path, out: &Path, data_dir: &Path, samples: usize) -> Result<()> {
    let mut t = load_checkpoint::<F>(path)?;
    let test = load_split(data_dir, "test")?.take(samples);
    let cfg = encap_core::data::BatchCfg {
        batch_size: samples,
        shuffle_seed: None,
        augment: false,
        pad_to: t.run.train.pad_to,
    };
    let batch = encap_core::data::batches::<F>(&test, cfg, 0)?.next().context("empty test split")?;
    let rows = polarization(&t.net, &mut t.store, &batch.images)?;
    let f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_histogram_csv(f, &rows)?;
    println!("mass at |cos| > 0.5: {:.2}%", polarized_mass(&rows, 0.5));
    Ok(())
}
