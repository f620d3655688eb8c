//! Command-line front end. Exit codes: 0 success, 1 usage, 2 config,
//! 3 runtime failure or divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::emulation::max_deviation;
use crate::error::{Error, Result};
use crate::experiments::{
    activation_growth_experiment, decay_sweep, equilibrium_experiment, gradient_bias_experiment, log_decay_grid,
    run_training, sweep_base, BiasConfig, BiasReport, EquilibriumConfig, EquilibriumTrace, GrowthConfig, SweepCell,
};
use crate::net::MetricsRecord;
use crate::selftest;
use crate::tensor::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Largest streaming/batched deviation `emulate-check` accepts.
pub const EMULATION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "onlinenorm", version, about = "Online normalization experiments", arg_required_else_help = true)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for CSV output; created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the MLP described by the config; writes metrics.csv.
    Train,
    /// Gradient angle against batch size for a batch-normalized net; writes grad_bias.csv.
    GradBias(GradBiasArgs),
    /// Activation RMS through a deep chain with perturbed statistics; writes growth.csv.
    Growth(GrowthArgs),
    /// Weight-norm equilibrium under L2 decay; writes equilibrium.csv.
    Equilibrium(EquilibriumArgs),
    /// Final loss over an alpha_f x alpha_b grid; writes sweep.csv.
    Sweep(SweepArgs),
    /// Compare batched and streaming moments.
    EmulateCheck(EmulateArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
struct GradBiasArgs {
    #[arg(long, default_value_t = 2048)]
    dataset_size: usize,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8, 16, 32, 64, 128, 2048])]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
}

#[derive(Debug, Args)]
struct GrowthArgs {
    #[arg(long, default_value_t = 64)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Fraction by which standard deviations are underestimated.
    #[arg(long, default_value_t = 0.05)]
    bias_sigma_down: f64,
}

#[derive(Debug, Args)]
struct EquilibriumArgs {
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    /// Only apply L2 decay.
    #[arg(long)]
    zero_gradients: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Grid points per axis; decays are `1 - 10^-k` for k evenly spaced in [1, 3].
    #[arg(long, default_value_t = 4)]
    points: usize,
}

#[derive(Debug, Args)]
struct EmulateArgs {
    /// Group size.
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    /// Number of groups to stream.
    #[arg(long, default_value_t = 64)]
    groups: usize,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = std::result::Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn seed(cli: &Cli) -> std::result::Result<u64, Failure> {
    Ok(load_config(cli)?.train.seed)
}

fn write_csv<R: IntoIterator<Item = S>, S: AsRef<[u8]>>(
    dir: &Path,
    name: &str,
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(path)
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let (run, _, _) = run_training(&cfg)?;
            let path = write_csv(&cli.out, "metrics.csv", &MetricsRecord::HEADER, run.records.iter().map(|r| r.fields()))?;
            if let Some((step, loss)) = run.diverged {
                return Err(Error::Diverged { step, loss }.into());
            }
            if let Some(r) = run.final_record() {
                println!("loss {:.6} accuracy {:.4} -> {}", r.loss, r.accuracy, path.display());
            }
            Ok(EXIT_OK)
        }
        Command::GradBias(a) => {
            let cfg = BiasConfig {
                seed: seed(cli)?,
                dataset_size: a.dataset_size,
                batch_sizes: a.batch_sizes.clone(),
                repetitions: a.repetitions,
                channels: a.channels,
                ..BiasConfig::default()
            };
            let report: BiasReport = gradient_bias_experiment(&cfg)?;
            let rows = report.entries.iter().map(|e| {
                [e.batch_size.to_string(), e.mean_angle_deg.to_string(), e.std_angle_deg.to_string(), e.repetitions.to_string()]
            });
            write_csv(&cli.out, "grad_bias.csv", &BiasReport::HEADER, rows)?;
            for e in &report.entries {
                println!("batch {:>5}: {:8.4} deg (std {:.4})", e.batch_size, e.mean_angle_deg, e.std_angle_deg);
            }
            Ok(EXIT_OK)
        }
        Command::Growth(a) => {
            let base = GrowthConfig {
                depth: a.depth,
                width: a.width,
                samples: a.samples,
                noise: a.noise,
                bias_sigma_down: a.bias_sigma_down,
                layer_scaling: false,
                seed: seed(cli)?,
            };
            let plain = activation_growth_experiment(&base)?;
            let scaled = activation_growth_experiment(&GrowthConfig { layer_scaling: true, ..base })?;
            let rows = plain
                .rms
                .iter()
                .zip(&scaled.rms)
                .enumerate()
                .map(|(i, (p, s))| [(i + 1).to_string(), p.to_string(), s.to_string()]);
            write_csv(&cli.out, "growth.csv", &["layer", "rms_without_scaling", "rms_with_scaling"], rows)?;
            println!("without layer scaling: log-rms slope {:.5}, max/min {:.4}", plain.log_slope(), plain.max_min_ratio());
            println!("with layer scaling:    log-rms slope {:.5}, max/min {:.4}", scaled.log_slope(), scaled.max_min_ratio());
            Ok(EXIT_OK)
        }
        Command::Equilibrium(a) => {
            let cfg = EquilibriumConfig {
                eta: a.eta,
                lambda: a.lambda,
                steps: a.steps,
                seed: seed(cli)?,
                zero_gradients: a.zero_gradients,
                ..EquilibriumConfig::default()
            };
            let trace = equilibrium_experiment(&cfg)?;
            let rows = trace.records.iter().map(|r| {
                [r.step.to_string(), r.w_norm.to_string(), r.grad_norm.to_string(), r.grad_norm_mean.to_string()]
            });
            write_csv(&cli.out, "equilibrium.csv", &EquilibriumTrace::HEADER, rows)?;
            println!("final-quartile |w| {:.6}, ratio {:.4}", trace.final_w_norm, trace.ratio);
            Ok(EXIT_OK)
        }
        Command::Sweep(a) => {
            if a.points == 0 {
                return Err(Failure::Runtime("--points must be positive".into()));
            }
            let base = match &cli.config {
                Some(_) => load_config(cli)?,
                None => sweep_base(cli.seed.unwrap_or(1)),
            };
            let grid = log_decay_grid(1.0, 3.0, a.points);
            let cells = decay_sweep(&grid, &grid, &base)?;
            let rows = cells.iter().map(|c| {
                [c.alpha_f.to_string(), c.alpha_b.to_string(), c.final_loss.to_string(), c.diverged.to_string()]
            });
            write_csv(&cli.out, "sweep.csv", &SweepCell::HEADER, rows)?;
            for c in &cells {
                println!("alpha_f {:.4} alpha_b {:.4}: loss {:.6}{}", c.alpha_f, c.alpha_b, c.final_loss, if c.diverged { " (diverged)" } else { "" });
            }
            Ok(EXIT_OK)
        }
        Command::EmulateCheck(a) => {
            let mut rng = Rng::new(seed(cli)?);
            let xs = rng.normal_vec(a.n.saturating_mul(a.groups), 1.0);
            let dev = max_deviation(&xs, a.n, a.alpha)?;
            println!("max deviation {dev:e} (n = {}, alpha = {}, {} samples)", a.n, a.alpha, xs.len());
            Ok(if dev <= EMULATION_TOLERANCE { EXIT_OK } else { EXIT_RUNTIME })
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for (name, ok) in &results {
                println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
            }
            Ok(if results.iter().all(|(_, ok)| *ok) { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}
