//! `hesplit`: local, split and encrypted-split training, the leakage demo,
//! HE micro-benchmarks and a loopback self-test in one binary.

mod bench;
mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hesplit_core::ckks::HeSet;
use hesplit_core::data::Profile;
use hesplit_core::split::{ClientEncryption, SplitError};
use hesplit_core::wire::{Mode, DEFAULT_PORT};

/// Split learning with a CKKS-encrypted server layer.
///
/// Every flag can also be set through an environment variable named
/// `HESPLIT_<FLAG>`, e.g. `HESPLIT_EPOCHS=3`.
#[derive(Parser, Debug)]
#[command(name = "hesplit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the unsplit model in one process.
    TrainLocal(TrainLocalArgs),
    /// Serve one split-learning session, then exit.
    SplitServer(ServerArgs),
    /// Connect to a server and drive a split-learning session.
    SplitClient(ClientArgs),
    /// Reconstruct activations from leaked gradients (prior protocol).
    AttackDemo(AttackArgs),
    /// Time each CKKS primitive and print ciphertext sizes.
    BenchHe(BenchArgs),
    /// End-to-end equivalence checks with both roles as child processes.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Labelled CSV: one row per sample, label first.
    #[arg(long, env = "HESPLIT_DATA", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading a file.
    #[arg(long, env = "HESPLIT_SYNTHETIC")]
    pub synthetic: Option<usize>,
    #[arg(long, env = "HESPLIT_PROFILE", default_value = "mitbih")]
    pub profile: Profile,
    /// Fraction of samples used for training; the rest is the test split.
    #[arg(long, env = "HESPLIT_TRAIN_RATIO", default_value_t = 0.5)]
    pub train_ratio: f64,
    /// Channels of both client convolutions.
    #[arg(long, env = "HESPLIT_CONV_CHANNELS", default_value_t = 16)]
    pub conv_channels: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, env = "HESPLIT_EPOCHS", default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, env = "HESPLIT_LR", default_value_t = 0.001)]
    pub lr: f64,
    #[arg(short = 'n', long, env = "HESPLIT_BATCH_SIZE", default_value_t = 4)]
    pub batch_size: usize,
    /// Batches per epoch; defaults to every full batch of the training split.
    #[arg(long, env = "HESPLIT_BATCHES")]
    pub batches: Option<usize>,
    #[arg(long, env = "HESPLIT_SEED", default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Report path; `.csv` selects CSV, anything else JSON.
    #[arg(long, env = "HESPLIT_REPORT")]
    pub report: Option<PathBuf>,
    /// Include per-iteration traces in the report.
    #[arg(long, env = "HESPLIT_KEEP_ITERATIONS")]
    pub keep_iterations: bool,
    /// Write the trained weights as a checkpoint.
    #[arg(long, env = "HESPLIT_SAVE_MODEL")]
    pub save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLocalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct ServerArgs {
    #[arg(long, env = "HESPLIT_HOST", default_value = "127.0.0.1")]
    pub host: String,
    /// Port to listen on; 0 picks a free one.
    #[arg(long, env = "HESPLIT_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Reject clients proposing another mode.
    #[arg(long, env = "HESPLIT_REQUIRE_MODE")]
    pub require_mode: Option<Mode>,
    /// Reject clients proposing another HE parameter set.
    #[arg(long, env = "HESPLIT_REQUIRE_HE_SET")]
    pub require_he_set: Option<HeSet>,
    /// Reject clients proposing another batch size.
    #[arg(long, env = "HESPLIT_REQUIRE_BATCH_SIZE")]
    pub require_batch_size: Option<u32>,
    /// Fixed seed for refresh masks; for reproducible tests only.
    #[arg(long, env = "HESPLIT_PRIVATE_SEED", hide = true)]
    pub private_seed: Option<u64>,
    #[arg(long, env = "HESPLIT_REPORT")]
    pub report: Option<PathBuf>,
    #[arg(long, env = "HESPLIT_SAVE_MODEL")]
    pub save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClientArgs {
    #[arg(long, env = "HESPLIT_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "HESPLIT_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, env = "HESPLIT_MODE", default_value = "he")]
    pub mode: Mode,
    #[arg(long, env = "HESPLIT_HE_SET", default_value = "s1")]
    pub he_set: HeSet,
    /// Refresh the server weights every k iterations.
    #[arg(long, env = "HESPLIT_REFRESH_EVERY", default_value_t = 1)]
    pub refresh_every: u32,
    /// Encrypt activations under the secret or the public key.
    #[arg(long, env = "HESPLIT_ENCRYPTION", default_value = "secret")]
    pub encryption: ClientEncryption,
    /// Also send the plaintext weight gradient. Leaks; for the audit demo only.
    #[arg(long, env = "HESPLIT_DEBUG_SEND_GRAD_W")]
    pub debug_send_grad_w: bool,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Batch size of the attacked iteration; must equal the class count.
    #[arg(long, env = "HESPLIT_BATCH", default_value_t = 5)]
    pub batch: usize,
    /// Train locally for this many epochs before attacking.
    #[arg(long, env = "HESPLIT_TRAIN_EPOCHS", default_value_t = 0)]
    pub train_epochs: usize,
    #[arg(long, env = "HESPLIT_LR", default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, env = "HESPLIT_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Directory for the reconstruction CSVs and summary.
    #[arg(long, env = "HESPLIT_OUT", default_value = "attack_out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, env = "HESPLIT_HE_SET", value_delimiter = ',', default_value = "s1,s2")]
    pub he_set: Vec<HeSet>,
    /// Repetitions per primitive; the median is reported.
    #[arg(long, env = "HESPLIT_REPS", default_value_t = 5)]
    pub reps: usize,
    /// Disable data parallelism.
    #[arg(long, env = "HESPLIT_SEQUENTIAL")]
    pub sequential: bool,
    /// Also write the timings as JSON.
    #[arg(long, env = "HESPLIT_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, env = "HESPLIT_HE_SET", default_value = "toy")]
    pub he_set: HeSet,
    #[arg(long, env = "HESPLIT_SYNTHETIC", default_value_t = 48)]
    pub samples: usize,
    #[arg(long, env = "HESPLIT_EPOCHS", default_value_t = 2)]
    pub epochs: usize,
    /// Keep the child reports in this directory.
    #[arg(long, env = "HESPLIT_WORKDIR")]
    pub workdir: Option<PathBuf>,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        Self { code: e.exit_code() as u8, message: e.to_string() }
    }
}

impl From<hesplit_core::data::DataError> for CliError {
    fn from(e: hesplit_core::data::DataError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<hesplit_core::nn::NnError> for CliError {
    fn from(e: hesplit_core::nn::NnError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<hesplit_core::ckks::CkksError> for CliError {
    fn from(e: hesplit_core::ckks::CkksError) -> Self {
        Self { code: 4, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::TrainLocal(a) => commands::train_local(a),
        Command::SplitServer(a) => commands::split_server(a),
        Command::SplitClient(a) => commands::split_client(a),
        Command::AttackDemo(a) => commands::attack_demo(a),
        Command::BenchHe(a) => bench::bench_he(a),
        Command::Selftest(a) => selftest::selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
