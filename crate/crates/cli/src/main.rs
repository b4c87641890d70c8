mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rrld_core::{ErrorClass, Variant};

/// Self-distillation training for small vision transformers under
/// leave-one-domain-out evaluation.
#[derive(Debug, Parser)]
#[command(name = "rrld", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic multi-domain dataset to an image folder.
    Synth(SynthArgs),
    /// Append a noise-corrupted copy of a dataset as a new domain.
    Corrupt(CorruptArgs),
    /// Train one variant over every held-out target and seed.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, per domain.
    Eval(EvalArgs),
    /// Aggregate run directories into a mean ± std table.
    Report(ReportArgs),
    /// Run the built-in correctness checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    /// Images per class in each domain.
    #[arg(long, default_value_t = 300)]
    per_domain: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root (`<domain>/<class>/<image>.png`).
    #[arg(long)]
    data: PathBuf,
    /// Image side length; read from `dataset.json` when present.
    #[arg(long)]
    image_size: Option<usize>,
    /// Channel count; read from `dataset.json` when present.
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Debug, Args)]
struct CorruptArgs {
    #[command(flatten)]
    source: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated noise kinds; each image receives one of them.
    #[arg(long, value_delimiter = ',', default_value = "gaussian,impulse,speckle,shot")]
    kinds: Vec<String>,
    /// Gaussian standard deviation.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Impulse (salt-and-pepper) rate.
    #[arg(long, default_value_t = 0.05)]
    impulse_p: f64,
    /// Speckle standard deviation.
    #[arg(long, default_value_t = 0.2)]
    speckle_sigma: f64,
    /// Shot-noise photon scale.
    #[arg(long, default_value_t = 60.0)]
    shot_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Name of the new domain.
    #[arg(long, default_value = "noisy")]
    domain_name: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root; may be omitted with --manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Rerun exactly what a previous run's manifest.json describes.
    #[arg(long, conflicts_with_all = ["variant", "seeds", "steps"])]
    manifest: Option<PathBuf>,
    /// Run directory; defaults to `$RRLD_OUTPUT_ROOT/<variant>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "RRLD_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 5.0)]
    t1: f64,
    #[arg(long, default_value_t = 1.0)]
    t2: f64,
    /// Steps between validation passes; one epoch when unset.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Only hold out these domains.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Inclusive block range for the tap, e.g. `2-4`.
    #[arg(long, value_parser = parse_range)]
    tap_range: Option<(usize, usize)>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Random flip and shift on the clean input.
    #[arg(long)]
    base_augment: bool,
    /// Treat the final block as a constant teacher in the block term.
    #[arg(long)]
    detach_ibsd_teacher: bool,
    /// Augmentation policy JSON; the built-in ImageNet policy when unset.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4.0)]
    mlp_ratio: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Only score this domain.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories, each holding a result.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    /// Let gradients flow through the augmented forward pass.
    Stopgrad,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Inject a fault; the matching check must then fail.
    #[arg(long = "break", value_enum)]
    fault: Option<Fault>,
    /// Run the gradient check in double precision (the only precision
    /// available; accepted for clarity).
    #[arg(long)]
    float64: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: rrld_core::Error| e.to_string())
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("expected LO-HI, got '{s}'"))?;
    let lo = a.trim().parse().map_err(|_| format!("bad lower bound '{a}'"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad upper bound '{b}'"))?;
    Ok((lo, hi))
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Selftest(a) => commands::selftest(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
