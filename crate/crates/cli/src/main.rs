use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Learn and evaluate per-attribute latent edit directions on synthetic generators.
///
/// Set MOE_DISENTANGLE_THREADS to cap the worker count and RUST_LOG to adjust
/// log verbosity (default: info).
#[derive(Debug, Parser)]
#[command(name = "moe-disentangle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic generator and a labeled latent dataset.
    GenData(GenDataArgs),
    /// Fit one logistic boundary per attribute from a labeled dataset.
    FitSbv(FitSbvArgs),
    /// Train the direction network against a generator and boundary set.
    Train(TrainArgs),
    /// Apply one edit to one latent and print the edited features as JSON.
    Edit(EditArgs),
    /// Measure attribute accuracy, identity score and cross-alignment.
    Eval(EvalArgs),
    /// Train and evaluate a grid of loss variants and temperatures.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator family: linear or mlp.
    #[arg(long, default_value = "linear")]
    pub kind: String,
    /// Latent width K.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Feature width F.
    #[arg(long, default_value_t = 64)]
    pub f: usize,
    /// Number of attributes.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Hidden width of the mlp generator.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Number of latent samples.
    #[arg(long, default_value_t = 20_000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes <prefix>.generator.ckpt, <prefix>.jsonl and <prefix>.manifest.json.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitSbvArgs {
    /// Labeled JSON-lines dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// L2 penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Gradient-step budget per attribute.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Minimum held-out accuracy per attribute.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator checkpoint.
    #[arg(long)]
    pub generator: PathBuf,
    /// Boundary checkpoint.
    #[arg(long)]
    pub sbv: PathBuf,
    /// Output checkpoint; also receives intermediate and last-good states.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a training checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Generator checkpoint.
    #[arg(long)]
    pub generator: PathBuf,
    /// Dataset to take the latent from (with --z-index).
    #[arg(long, requires = "z_index")]
    pub dataset: Option<PathBuf>,
    /// Row of --dataset to edit.
    #[arg(long, requires = "dataset", conflicts_with = "z_file")]
    pub z_index: Option<usize>,
    /// JSON file holding one latent as an array of numbers.
    #[arg(long, required_unless_present = "z_index")]
    pub z_file: Option<PathBuf>,
    /// Attribute index.
    #[arg(long)]
    pub attr: usize,
    /// Step size.
    #[arg(long, allow_negative_numbers = true)]
    pub xi: f64,
    /// Step along the unit-normalized direction instead of the raw one.
    #[arg(long)]
    pub unit: bool,
    /// Write JSON here (with a manifest) instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub sbv: PathBuf,
    /// Latents to evaluate on (labels are ignored).
    #[arg(long)]
    pub dataset: PathBuf,
    /// "auto" calibrates per attribute on the dataset; a number is used for every attribute.
    #[arg(long, default_value = "auto")]
    pub xi: String,
    /// Flip fraction targeted by "auto".
    #[arg(long, default_value_t = 0.95)]
    pub coverage: f64,
    /// Output JSON report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub sbv: PathBuf,
    /// Evaluation latents.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated subset of full,no-ga,no-ppa.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "full,no-ga,no-ppa")]
    pub variants: Vec<String>,
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "0.1,0.3,0.5,1,3")]
    pub r_temps: Vec<f64>,
    #[arg(long, default_value = "auto")]
    pub xi: String,
    #[arg(long, default_value_t = 0.95)]
    pub coverage: f64,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON table.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV copy of the table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = commands::configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::FitSbv(a) => commands::fit_sbv(a),
        Command::Train(a) => commands::train(a),
        Command::Edit(a) => commands::edit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
