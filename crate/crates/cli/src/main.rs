//! `geoecon`: operator entry points. Results go to files or the store; a
//! one-line summary goes to stdout; logs are JSON lines on stderr. Failures
//! print one JSON line `{"error": {"kind", "message"}}` on stderr and exit
//! with 2 for usage errors or 1 for runtime errors.

mod commands;
mod config;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing arguments and inputs.
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    geoecon::dataio::DataError,
    geoecon::align::AlignError,
    geoecon::model::ModelError,
    geoecon::store::StoreError
);

impl From<geoecon::pipeline::PipelineError> for CliError {
    fn from(e: geoecon::pipeline::PipelineError) -> Self {
        use geoecon::pipeline::PipelineError::*;
        match e {
            InvalidSpec(_) | UnknownModel(_) | Geo(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "geoecon", version, about = "Economic scoring from paired satellite and street-view imagery")]
pub struct Cli {
    /// JSON config file, or an inline JSON object; flags take precedence.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Pair satellite tiles with street views and write the pairs.
    Align(AlignArgs),
    /// Fit a model on one corpus period and write a checkpoint with its history.
    Train(TrainArgs),
    /// Run a scoring task into a store without the service.
    Predict(PredictArgs),
    /// Compute R² of predictions against labels.
    Eval(EvalArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; must be absent or empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Satellite tiles per period.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Comma-separated period labels.
    #[arg(long, value_delimiter = ',')]
    pub periods: Option<Vec<String>>,
    /// Street views carry a second signal that also drives the label.
    #[arg(long)]
    pub complementary: bool,
    #[arg(long)]
    pub counties_per_side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Pairs file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the corpus's last period.
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub max_km: Option<f64>,
    #[arg(long)]
    pub window_km: Option<f64>,
    /// Street-view heading in degrees, or `all`.
    #[arg(long)]
    pub heading: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// image 64, patch 16, dim 64, 4 heads, batch 32.
    Desk,
    /// image 224, patch 32, dim 256, 8 heads, batch 256.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModalityArg {
    Fused,
    SatelliteOnly,
    StreetViewOnly,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory; also receives history.json and the split.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    /// Model size when the config has no `model` section.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Full task specification as JSON; other task flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub task_id: Option<String>,
    /// Region as west,south,east,north.
    #[arg(long, conflicts_with = "counties")]
    pub bbox: Option<String>,
    /// Region as comma-separated county ids.
    #[arg(long, value_delimiter = ',')]
    pub counties: Option<Vec<String>>,
    /// One period, or FROM:TO.
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Also write the task report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON lines with `label` and `prediction`; no model needed.
    #[arg(long, conflicts_with_all = ["checkpoint", "pairs"])]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pairs file to score, e.g. the holdout.jsonl written by `train`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also write per-pair predictions here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "GEOECON_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "GEOECON_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "GEOECON_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long, env = "GEOECON_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Worker count for submissions that name none.
    #[arg(long, env = "GEOECON_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, env = "GEOECON_CORS_ORIGIN")]
    pub cors_origin: Option<String>,
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("GEOECON_LOG", "info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let ms = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_millis());
            let line = serde_json::json!({
                "ts_ms": ms as u64,
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.message() } });
    eprintln!("{line}");
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_string()));
        }
    };
    init_logging();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
