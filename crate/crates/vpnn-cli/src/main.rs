//! Command-line interface: train/eval models, run the gradient and volume
//! checkers, profile layer-wise learning, and print parameter counts.
//!
//! Exit codes: 0 success, 1 check failure (gradcheck/volcheck), 2 usage or
//! configuration error, 3 data error, 4 training divergence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpnn::data::{self, Dataset};
use vpnn::diagnostics;
use vpnn::optim::{self, TrainConfig};
use vpnn::rng::derive_seed;
use vpnn::{Error, Model, ModelConfig, SeededRng, Variant};

const EXIT_OK: u8 = 0;
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

// Separates the batch-shuffle stream from the model-build stream.
const SHUFFLE_SALT: u64 = 0xba7c4;

#[derive(Parser)]
#[command(
    name = "vpnn",
    about = "Volume-preserving neural networks: training, checking, profiling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, print `final_accuracy=<float>`.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset, print `accuracy=<float>`.
    Eval(EvalArgs),
    /// Compare hand-derived gradients against the finite-difference oracle.
    Gradcheck(GradcheckArgs),
    /// Numerically verify |det J| = 1 for the hidden map.
    Volcheck(VolcheckArgs),
    /// Train a deep model briefly and report per-layer learning amounts.
    Profile(ProfileArgs),
    /// Print trainable parameter counts.
    Paramcount(ParamcountArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Model variant: vpnn, vpnn1.3, vpnnt, s-relu, mixed1, mixed2.
    #[arg(long)]
    variant: String,
    /// Rotation/permutation factors per layer (default 2·ceil(log2 n_in)).
    #[arg(long)]
    k: Option<usize>,
    /// Chebyshev contraction factor override (e.g. `--variant vpnn
    /// --cheb-m 1.3` reproduces vpnn1.3; sets the initial value for vpnnt).
    #[arg(long)]
    cheb_m: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Training data: mnist:<images>,<labels> | csv:<path> |
    /// blobs:<n_per_class>,<dim>,<classes>,<separation>,<seed>.
    #[arg(long)]
    data: String,
    /// Held-out data in the same format. When omitted, a deterministic tail
    /// split of --data is held out (blobs 20%, file datasets 10%).
    #[arg(long)]
    test_data: Option<String>,
    /// Total layer count L (hidden layers + downsizer).
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    epochs: usize,
    /// Initial learning rate (first half of training).
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Late learning rate (second half of training).
    #[arg(long, default_value_t = 0.01)]
    lr_late: f64,
    /// Fraction of epochs run at the initial learning rate.
    #[arg(long, default_value_t = 0.5)]
    switch_fraction: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Seed for the model build; batch shuffling derives from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Batch-parallel chunk count (1 = sequential; results are
    /// reproducible for a fixed value on any machine).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write the trained model here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-epoch CSV report (epoch,loss,test_accuracy,seconds).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset in the --data format.
    #[arg(long)]
    data: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Input width (must be ≤ 16; the oracle enumerates every parameter).
    #[arg(long)]
    n_in: usize,
    #[arg(long, default_value_t = 4)]
    n_out: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Random (input, target) draws to check.
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Args)]
struct VolcheckArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    n_in: usize,
    #[arg(long, default_value_t = 4)]
    n_out: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Allowed deviation of |det J| from 1.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Random points to probe.
    #[arg(long, default_value_t = 10)]
    points: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: String,
    /// Total layer count L; the learning-amount runs use deep models.
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Fixed learning rate (no schedule while profiling).
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: u64,
    /// Write the profile CSV here (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamcountArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    n_in: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => run(cmd_train(args)),
        Command::Eval(args) => run(cmd_eval(args)),
        Command::Gradcheck(args) => run(cmd_gradcheck(args)),
        Command::Volcheck(args) => run(cmd_volcheck(args)),
        Command::Profile(args) => run(cmd_profile(args)),
        Command::Paramcount(args) => run(cmd_paramcount(args)),
    };
    ExitCode::from(code)
}

fn run(result: Result<u8, CliError>) -> u8 {
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Format { .. }
        | Error::Csv(_)
        | Error::CorruptModel(_)
        | Error::DimensionMismatch { .. } => EXIT_DATA,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::parse(s).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant '{s}' (expected vpnn, vpnn1.3, vpnnt, s-relu, mixed1, mixed2)"
        ))
    })
}

enum DataSpec {
    Mnist { images: PathBuf, labels: PathBuf },
    Csv(PathBuf),
    Blobs {
        n_per_class: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        seed: u64,
    },
}

impl DataSpec {
    fn parse(s: &str) -> Result<DataSpec, CliError> {
        let usage = || {
            CliError::Usage(format!(
                "bad data spec '{s}' (expected mnist:<images>,<labels> | csv:<path> | \
                 blobs:<n_per_class>,<dim>,<classes>,<separation>,<seed>)"
            ))
        };
        let (kind, rest) = s.split_once(':').ok_or_else(usage)?;
        match kind {
            "mnist" => {
                let (images, labels) = rest.split_once(',').ok_or_else(usage)?;
                Ok(DataSpec::Mnist {
                    images: images.into(),
                    labels: labels.into(),
                })
            }
            "csv" => Ok(DataSpec::Csv(rest.into())),
            "blobs" => {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 5 {
                    return Err(usage());
                }
                Ok(DataSpec::Blobs {
                    n_per_class: parts[0].parse().map_err(|_| usage())?,
                    dim: parts[1].parse().map_err(|_| usage())?,
                    classes: parts[2].parse().map_err(|_| usage())?,
                    separation: parts[3].parse().map_err(|_| usage())?,
                    seed: parts[4].parse().map_err(|_| usage())?,
                })
            }
            _ => Err(usage()),
        }
    }

    fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataSpec::Mnist { images, labels } => {
                Ok(data::preprocess(data::load_mnist_idx(images, labels)?))
            }
            DataSpec::Csv(path) => Ok(data::preprocess(data::load_csv(path)?)),
            DataSpec::Blobs {
                n_per_class,
                dim,
                classes,
                separation,
                seed,
            } => Ok(data::synthetic_blobs(
                *n_per_class,
                *dim,
                *classes,
                *separation,
                *seed,
            )?),
        }
    }

    /// Held-out fraction used when no --test-data is given.
    fn holdout_fraction(&self) -> f64 {
        match self {
            DataSpec::Blobs { .. } => 0.2,
            _ => 0.1,
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8, CliError> {
    let variant = parse_variant(&args.model.variant)?;
    let spec = DataSpec::parse(&args.data)?;
    let full = spec.load()?;
    let (train_data, test_data) = match &args.test_data {
        Some(t) => (full, DataSpec::parse(t)?.load()?),
        None => full.split_tail(spec.holdout_fraction()),
    };

    let mut config = ModelConfig::new(
        variant,
        train_data.width(),
        train_data.n_classes().max(test_data.n_classes()),
        args.layers,
        args.seed,
    );
    if let Some(k) = args.model.k {
        config = config.with_k(k);
    }
    if let Some(m) = args.model.cheb_m {
        config = config.with_cheb_m(m);
    }
    let mut model = config.build()?;

    let cfg = TrainConfig {
        lr_initial: args.lr,
        lr_late: args.lr_late,
        switch_fraction: args.switch_fraction,
        momentum: args.momentum,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: derive_seed(args.seed, SHUFFLE_SALT),
        threads: args.threads,
    };
    let report = optim::train(&mut model, &train_data, &test_data, &cfg)?;

    if let Some(path) = &args.out {
        model.save(path)?;
    }
    if let Some(path) = &args.report {
        let mut w = BufWriter::new(File::create(path).map_err(Error::from)?);
        report.write_csv(&mut w)?;
        w.flush().map_err(Error::from)?;
    }
    println!("final_accuracy={}", report.final_accuracy);
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, CliError> {
    let model = Model::load(&args.model)?;
    let dataset = DataSpec::parse(&args.data)?.load()?;
    let accuracy = optim::evaluate(&model, &dataset)?;
    println!("accuracy={accuracy}");
    Ok(EXIT_OK)
}

fn build_probe_model(
    flags: &ModelFlags,
    n_in: usize,
    n_out: usize,
    layers: usize,
    seed: u64,
) -> Result<Model, CliError> {
    let variant = parse_variant(&flags.variant)?;
    let mut config = ModelConfig::new(variant, n_in, n_out, layers, seed);
    if let Some(k) = flags.k {
        config = config.with_k(k);
    }
    if let Some(m) = flags.cheb_m {
        config = config.with_cheb_m(m);
    }
    Ok(config.build()?)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8, CliError> {
    if args.n_in > 16 {
        return Err(CliError::Usage(format!(
            "gradcheck enumerates every parameter; n_in must be ≤ 16, got {}",
            args.n_in
        )));
    }
    let model = build_probe_model(&args.model, args.n_in, args.n_out, args.layers, args.seed)?;
    let report = diagnostics::grad_check(&model, args.samples, args.tol, derive_seed(args.seed, 1))?;
    print!("{}", report.summary());
    Ok(if report.pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_volcheck(args: VolcheckArgs) -> Result<u8, CliError> {
    let variant = parse_variant(&args.model.variant)?;
    if !variant.is_volume_preserving() {
        return Err(CliError::Usage(format!(
            "{} is not volume preserving by design (dense weights or ReLU); \
             volcheck applies to vpnn, vpnn1.3, vpnnt",
            variant.name()
        )));
    }
    if args.n_in > 16 {
        return Err(CliError::Usage(format!(
            "volcheck assembles an n×n Jacobian; n_in must be ≤ 16, got {}",
            args.n_in
        )));
    }
    let model = build_probe_model(&args.model, args.n_in, args.n_out, args.layers, args.seed)?;
    let mut rng = SeededRng::new(derive_seed(args.seed, 2));
    let mut worst = 0.0f64;
    for _ in 0..args.points {
        let point = diagnostics::smooth_input(&model, &mut rng)?;
        let det = diagnostics::model_volume_check(&model, &point, 1e-6)?;
        println!("det={det}");
        worst = worst.max((det - 1.0).abs());
    }
    let pass = worst < args.tol;
    println!(
        "{} worst_abs_dev={worst:.3e} tol={:.1e}",
        if pass { "PASS" } else { "FAIL" },
        args.tol
    );
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_profile(args: ProfileArgs) -> Result<u8, CliError> {
    let variant = parse_variant(&args.model.variant)?;
    let dataset = DataSpec::parse(&args.data)?.load()?;
    let mut config = ModelConfig::new(
        variant,
        dataset.width(),
        dataset.n_classes(),
        args.layers,
        args.seed,
    );
    if let Some(k) = args.model.k {
        config = config.with_k(k);
    }
    if let Some(m) = args.model.cheb_m {
        config = config.with_cheb_m(m);
    }
    let mut model = config.build()?;
    let profile = diagnostics::learning_profile(
        &mut model,
        &dataset,
        args.epochs,
        args.lr,
        args.batch,
        derive_seed(args.seed, SHUFFLE_SALT),
        args.threads as usize,
    )?;
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(Error::from)?);
            profile.write_csv(&mut w)?;
            w.flush().map_err(Error::from)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            profile.write_csv(&mut stdout)?;
        }
    }
    println!("slope={}", profile.slope);
    Ok(EXIT_OK)
}

fn cmd_paramcount(args: ParamcountArgs) -> Result<u8, CliError> {
    let variant = parse_variant(&args.model.variant)?;
    if args.n_in == 0 || !args.n_in.is_multiple_of(2) {
        return Err(CliError::Usage(format!(
            "n_in must be even and positive, got {}",
            args.n_in
        )));
    }
    let k = args.model.k.unwrap_or_else(|| vpnn::model::default_k(args.n_in));
    let count = vpnn::params::param_count_for(variant, args.n_in, k, args.layers);
    println!(
        "variant={} n_in={} k={k} layers={}",
        variant.name(),
        args.n_in,
        args.layers
    );
    println!("per_layer={}", count.per_layer);
    println!("downsizer={}", count.downsizer);
    println!("total={}", count.total);
    Ok(EXIT_OK)
}
