//! `metasampler`: generate synthetic data, train and compare samplers,
//! evaluate checkpoints and check gradients.
//!
//! Exit codes: 0 success, 2 usage error, 3 numerical failure or divergence,
//! 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metasampler::losses::Metric;
use metasampler::meta::ToyDims;
use metasampler::trainer::{Mode, SamplerKind};

use crate::commands::{CompareArgs, DumpArgs, EvalArgs, GenArgs, GenOverrides, GradcheckArgs, TrainArgs};

pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Numerical(e) | Failure::Other(e) => e,
        }
    }
}

pub fn core_failure(e: metasampler::Error) -> Failure {
    use metasampler::Error as E;
    match e {
        E::NonFinite { .. } | E::Numerical(_) => Failure::Numerical(e.into()),
        E::Io(_) => Failure::Other(e.into()),
        _ => Failure::Usage(e.into()),
    }
}

#[derive(Parser)]
#[command(name = "metasampler", version, about = "Learned data sampler experiments on synthetic identity data")]
struct Cli {
    /// Run every data-parallel section on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, optionally imbalanced or label-noised.
    GenData(GenDataCmd),
    /// Train one model with one sampler.
    Train(TrainCmd),
    /// Evaluate a model checkpoint on a dataset.
    Eval(EvalCmd),
    /// Train every (sampler, seed) cell and tabulate per-sampler medians.
    Compare(CompareCmd),
    /// Finite-difference check of every op and of the sampler meta-gradient.
    Gradcheck(GradcheckCmd),
    /// Write the full-dataset sampling policy of a trained sampler as CSV.
    DumpPolicy(DumpCmd),
}

#[derive(Args)]
struct GenDataCmd {
    /// JSON config (`spec`, `seed`, `imbalance`, `few_shot_n`, `noise`,
    /// `noise_seed`) or a gen-data manifest. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    /// Samples per identity (the head count under --long-tail).
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    /// Std of identity centers.
    #[arg(long)]
    spread: Option<f64>,
    /// Length of each view-mode offset.
    #[arg(long)]
    mode_offset: Option<f64>,
    /// Within-mode noise std.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Fraction of samples drawn with 3x noise and tagged hard.
    #[arg(long)]
    hard_fraction: Option<f64>,
    /// Fraction of each identity held out for query and gallery.
    #[arg(long)]
    holdout: Option<f64>,
    /// Power-law exponent for long-tail identity sizes.
    #[arg(long, value_name = "EXPONENT")]
    long_tail: Option<f64>,
    /// Smallest identity under --long-tail.
    #[arg(long, requires = "long_tail")]
    min_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of identities (largest first) down-sampled to --few-shot-n.
    #[arg(long, value_name = "FRACTION")]
    imbalance: Option<f64>,
    #[arg(long, value_name = "N")]
    few_shot_n: Option<usize>,
    /// Fraction of train labels switched to another identity.
    #[arg(long, value_name = "FRACTION")]
    noise: Option<f64>,
    /// Seed of the label switching (defaults to --seed).
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    /// JSON config (`dataset`, `train`) or a train manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// single or triplet.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Draw training batches i.i.d. instead of without replacement.
    #[arg(long)]
    with_replacement: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    /// JSON config (`dataset`, `model`, `metric`) or an eval manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// euclidean, squared_euclidean or cosine.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareCmd {
    /// JSON config (`dataset`, `train`, `samplers`, `seeds`) or a compare
    /// manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated sampler kinds, at least two.
    #[arg(long, value_delimiter = ',', value_parser = parse_sampler)]
    samplers: Option<Vec<SamplerKind>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// single or triplet.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ToyDims::default().input_dim)]
    input_dim: usize,
    #[arg(long, default_value_t = ToyDims::default().hidden_dim)]
    hidden_dim: usize,
    #[arg(long, default_value_t = ToyDims::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = ToyDims::default().identities)]
    identities: usize,
    #[arg(long, default_value_t = ToyDims::default().per_identity)]
    per_identity: usize,
    /// K and M of the meta problem.
    #[arg(long, default_value_t = ToyDims::default().batch)]
    batch: usize,
    /// Detach the policy normalizers in the analytic gradient (must fail).
    #[arg(long)]
    break_meta: bool,
    /// Also write a JSON report and manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpCmd {
    /// JSON config (`dataset`, `model`, `sampler`) or a dump-policy manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sampler checkpoint written by `train`.
    #[arg(long)]
    sampler: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: metasampler::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode `{s}`; valid: single, triplet"))
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown metric `{s}`; valid: euclidean, squared_euclidean, cosine"))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(c) => commands::gen_data(GenArgs {
            config: c.config,
            out: c.out,
            overrides: GenOverrides {
                identities: c.identities,
                per_id: c.per_id,
                input_dim: c.input_dim,
                spread: c.spread,
                mode_offset: c.mode_offset,
                noise_std: c.noise_std,
                hard_fraction: c.hard_fraction,
                holdout: c.holdout,
                long_tail: c.long_tail,
                min_count: c.min_count,
                seed: c.seed,
                imbalance: c.imbalance,
                few_shot_n: c.few_shot_n,
                noise: c.noise,
                noise_seed: c.noise_seed,
            },
        }),
        Command::Train(c) => commands::train(TrainArgs {
            config: c.config,
            dataset: c.dataset,
            sampler: c.sampler,
            seed: c.seed,
            epochs: c.epochs,
            mode: c.mode,
            with_replacement: c.with_replacement,
            out: c.out,
        }),
        Command::Eval(c) => commands::eval(EvalArgs {
            config: c.config,
            dataset: c.dataset,
            model: c.model,
            metric: c.metric,
            out: c.out,
        }),
        Command::Compare(c) => commands::compare(CompareArgs {
            config: c.config,
            dataset: c.dataset,
            samplers: c.samplers,
            seeds: c.seeds,
            epochs: c.epochs,
            mode: c.mode,
            out: c.out,
        }),
        Command::Gradcheck(c) => commands::gradcheck(GradcheckArgs {
            seed: c.seed,
            dims: ToyDims {
                input_dim: c.input_dim,
                hidden_dim: c.hidden_dim,
                embed_dim: c.embed_dim,
                identities: c.identities,
                per_identity: c.per_identity,
                batch: c.batch,
            },
            break_meta: c.break_meta,
            out: c.out,
        }),
        Command::DumpPolicy(c) => commands::dump_policy(DumpArgs {
            config: c.config,
            dataset: c.dataset,
            model: c.model,
            sampler: c.sampler,
            out: c.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        metasampler::parallel::set_enabled(false);
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
