//! `dta`: dataset fetching, training, evaluation, oracle checks and reports.

mod config;
mod fetch;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dta_core::adversarial::Linearization;
use dta_core::datasets::{load_pair, Dataset, PairName, Subsample};
use dta_core::masking::MaskKind;
use dta_core::networks::checkpoint::{stored_scalar_kind, Checkpoint};
use dta_core::oracle::{adversarial_effectiveness, solver_exactness};
use dta_core::scalar::{Scalar, ScalarKind};
use dta_core::training::{evaluate, run_experiment, MetricsRow, RunOptions};

use config::ExperimentFile;

#[derive(Parser)]
#[command(name = "dta", version, about = "Drop-to-adapt domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download datasets into the cache under DATA_ROOT.
    Fetch {
        /// Datasets to fetch (mnist, usps, svhn, cifar10, stl10); all when omitted.
        datasets: Vec<Dataset>,
        #[arg(long, env = "DATA_ROOT", default_value = "data")]
        data_root: PathBuf,
        /// Base URL serving `<dataset>/<file>` instead of the upstream hosts.
        #[arg(long)]
        mirror: Option<String>,
        /// TOML table of `"<dataset>/<file>" = "<md5>"` checksum overrides.
        #[arg(long)]
        checksums: Option<PathBuf>,
    },
    /// Run one experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override config keys, e.g. `--set epochs=1 optimizer.lr=1e-4`.
        #[arg(long = "set", num_args = 1.., value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = "DATA_ROOT", default_value = "data")]
        data_root: PathBuf,
        #[arg(long, env = "OUTPUT_ROOT", default_value = "runs")]
        output_root: PathBuf,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Write per-step mask statistics to debug.csv.
        #[arg(long)]
        debug_dump: bool,
    },
    /// Target-test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pair: PairName,
        #[arg(long, env = "DATA_ROOT", default_value = "data")]
        data_root: PathBuf,
        /// Evaluate on a seeded subset of at most this many test images.
        #[arg(long)]
        test_cap: Option<usize>,
    },
    /// Brute-force checks of the mask solver on tiny instances.
    Oracle {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Largest element-mask length L.
        #[arg(long, default_value_t = 12)]
        max_elements: usize,
        /// Largest channel count C.
        #[arg(long, default_value_t = 8)]
        max_channels: usize,
        /// Fix the flip budget (drawn per trial otherwise).
        #[arg(long)]
        budget: Option<usize>,
        /// Drop rate of the stochastic masks in the effectiveness trials.
        #[arg(long, default_value_t = 0.5)]
        drop_rate: f64,
        #[arg(long, default_value_t = Linearization::default())]
        linearization: Linearization,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summary table and plots from metrics CSVs.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Fetch {
            datasets,
            data_root,
            mirror,
            checksums,
        } => cmd_fetch(&datasets, &data_root, mirror, checksums.as_deref()),
        Command::Train {
            config,
            overrides,
            data_root,
            output_root,
            resume,
            debug_dump,
        } => cmd_train(&config, &overrides, &data_root, &output_root, resume, debug_dump),
        Command::Eval {
            checkpoint,
            pair,
            data_root,
            test_cap,
        } => cmd_eval(&checkpoint, pair, &data_root, test_cap),
        Command::Oracle {
            trials,
            max_elements,
            max_channels,
            budget,
            drop_rate,
            linearization,
            seed,
        } => cmd_oracle(trials, max_elements, max_channels, budget, drop_rate, linearization, seed),
        Command::Report { metrics, out } => {
            let paths: Vec<&Path> = metrics.iter().map(PathBuf::as_path).collect();
            let rows = report::write_report(&paths, &out)?;
            print!("{}", report::markdown(&rows));
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_fetch(datasets: &[Dataset], root: &Path, mirror: Option<String>, checksums: Option<&Path>) -> Result<ExitCode> {
    let checksums: BTreeMap<String, String> = match checksums {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => BTreeMap::new(),
    };
    let opts = fetch::FetchOptions { mirror, checksums };
    let list = if datasets.is_empty() { &Dataset::ALL[..] } else { datasets };
    for &ds in list {
        for (path, outcome) in fetch::fetch_dataset(ds, root, &opts).with_context(|| format!("fetching {ds}"))? {
            let what = match outcome {
                fetch::Outcome::Cached => "cached",
                fetch::Outcome::Downloaded => "downloaded",
            };
            println!("{what:>10}  {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    config: &Path,
    overrides: &[String],
    data_root: &Path,
    output_root: &Path,
    resume: bool,
    debug_dump: bool,
) -> Result<ExitCode> {
    let exp = ExperimentFile::load(config, overrides)?;
    let dta = exp.dta_config();
    println!("root seed: {}", dta.seed);
    for w in dta.validate()? {
        eprintln!("warning: {w}");
    }
    let arch = exp.architecture()?;
    let out = exp.output_dir(output_root);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("experiment.toml"), exp.to_toml())?;
    let pair = load_pair(exp.pair, data_root, &exp.subsample.into(), dta.seed)
        .with_context(|| format!("loading {} from {}", exp.pair, data_root.display()))?;
    println!(
        "{}: {} source / {} target / {} test images, {} ({:?})",
        exp.config_name,
        pair.source_train().len(),
        pair.target_train().len(),
        pair.target_test().len(),
        arch.name,
        exp.precision
    );
    let options = RunOptions {
        output_dir: out.clone(),
        resume,
        debug_dump,
        stop_after: None,
    };
    let print_row = |r: &MetricsRow| {
        println!(
            "epoch {:>3}  total {:.4}  task {:.4}  fdta {:.4}  cdta {:.4}  ent {:.4}  vat {:.4}  acc {:.4}  ({:.0}s)",
            r.epoch, r.total, r.task, r.fdta, r.cdta, r.entropy, r.vat, r.target_accuracy, r.wall_seconds
        )
    };
    let summary = match exp.precision {
        ScalarKind::F32 => run_experiment::<f32>(&dta, &pair, &arch, &options, print_row)?,
        ScalarKind::F64 => run_experiment::<f64>(&dta, &pair, &arch, &options, print_row)?,
    };
    if let Some(k) = summary.resumed_from {
        println!("resumed after epoch {k}");
    }
    println!("final target accuracy: {:.4}", summary.final_accuracy);
    println!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, pair: PairName, data_root: &Path, test_cap: Option<usize>) -> Result<ExitCode> {
    let caps = Subsample {
        source: Some(1),
        target: Some(1),
        test: test_cap,
    };
    let data = load_pair(pair, data_root, &caps, 0)?;
    fn acc<T: Scalar>(ckpt: &Path, data: &dta_core::datasets::DomainPair) -> Result<f64> {
        let net = Checkpoint::<T>::load(ckpt)?.network()?;
        Ok(evaluate(&net, data.target_test(), &data.normalization())?)
    }
    let accuracy = match stored_scalar_kind(checkpoint)? {
        ScalarKind::F32 => acc::<f32>(checkpoint, &data)?,
        ScalarKind::F64 => acc::<f64>(checkpoint, &data)?,
    };
    println!("target accuracy: {accuracy:.4} ({} images)", data.target_test().len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(
    trials: usize,
    max_elements: usize,
    max_channels: usize,
    budget: Option<usize>,
    drop_rate: f64,
    linearization: Linearization,
    seed: u64,
) -> Result<ExitCode> {
    if trials == 0 || max_elements == 0 || max_channels == 0 {
        bail!("trials and sizes must be ≥ 1");
    }
    println!("oracle seed: {seed}");
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("{}  {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    for (kind, max) in [(MaskKind::Element, max_elements), (MaskKind::Channel, max_channels)] {
        let r = solver_exactness(kind, trials, max, budget, seed)?;
        check(
            &format!("{} solver optimal on the linear proxy (units ≤ {max})", r.kind),
            r.exact == r.trials,
            format!("{}/{}", r.exact, r.trials),
        );
        if budget == Some(0) {
            check(
                &format!("{} zero budget returns the stochastic mask", r.kind),
                r.unchanged == r.trials,
                format!("{}/{}", r.unchanged, r.trials),
            );
        }
    }
    for kind in [MaskKind::Element, MaskKind::Channel] {
        let r = adversarial_effectiveness(kind, trials, drop_rate, linearization, seed)?;
        let frac = r.beats_random as f64 / r.trials as f64;
        check(
            &format!("{} adversarial divergence ≥ random same-budget mask", r.kind),
            frac >= 0.7,
            format!("{}/{} ({:.0}%, threshold 70%)", r.beats_random, r.trials, 100.0 * frac),
        );
        println!(
            "INFO  {} within 90% of the exhaustive maximum: {}/{}, mean ratio {:.3}; ≥ stochastic mask: {}/{}",
            r.kind, r.near_optimal, r.trials, r.mean_ratio_to_optimum, r.beats_stochastic, r.trials
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
