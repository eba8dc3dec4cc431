use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ipnet::IpNet;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "vrscope", version, about = "Metaverse session detection and activity classification on encrypted traffic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn payload-size signatures of one application from labeled captures.
    TrainSignatures(TrainSignaturesArgs),
    /// Train a stateless or stateful activity classifier from an interval CSV.
    TrainClassifier(TrainClassifierArgs),
    /// Generate a labeled synthetic trace.
    Synth(SynthArgs),
    /// Replay a capture file and write session reports.
    Analyze(AnalyzeArgs),
    /// Process a paced capture stream, writing reports as sessions close.
    Live(LiveArgs),
    /// Score a report file against the truth file of its trace.
    Evaluate(EvaluateArgs),
    /// Time the three processing stages on synthetic load.
    Bench(BenchArgs),
    /// Aggregate session reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct TrainSignaturesArgs {
    #[arg(long)]
    app: String,
    /// Primary domain, e.g. shapevrcloud or shapevrcloud.com.
    #[arg(long)]
    domain: String,
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Add the application to this existing model instead of starting empty.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long = "local-prefix", default_value = "10.0.0.0/8")]
    local_prefixes: Vec<IpNet>,
    #[arg(long = "udp-port", value_delimiter = ',')]
    udp_ports: Vec<u16>,
    /// Fixed UDP signature length instead of the learned one.
    #[arg(long)]
    udp_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Stateless,
    Stateful,
}

#[derive(Debug, Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    app: String,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pick hyperparameters by k-fold search over a grid.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    max_features: Option<usize>,
    /// Past states for the stateful model; the CSV's column count by default.
    #[arg(long)]
    past_states: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Application of scripts that do not name one, and of random scripts.
    #[arg(long)]
    app: Option<String>,
    /// One script object or a list of them. Without it, random scripts are drawn.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Signature model the traffic should match; the built-in one by default.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Overrides the seeds of script files; script i gets seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sidecar: PathBuf,
    /// Number of random scripts when no script file is given.
    #[arg(long, default_value_t = 1)]
    sessions: usize,
    /// Minimum length of each random script.
    #[arg(long, default_value_t = 300.0)]
    secs: f64,
    #[arg(long, default_value_t = 0)]
    background: usize,
    /// Planted signature copies in the background; turns collision exclusion off.
    #[arg(long, default_value_t = 0)]
    planted: usize,
    #[arg(long, default_value_t = 10.0)]
    interval_len: f64,
    /// Write the AS map of the generated address plan here.
    #[arg(long)]
    as_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// JSON engine configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Signature model; the built-in one by default.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    stateless: Vec<PathBuf>,
    #[arg(long)]
    stateful: Vec<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    past_states: Option<usize>,
    #[arg(long)]
    interval_len: Option<f64>,
    #[arg(long = "local-prefix")]
    local_prefixes: Vec<IpNet>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    as_map: Option<PathBuf>,
    /// Skip the time-critical UDP stage.
    #[arg(long)]
    no_udp: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write engine metrics as JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write labeled per-application interval CSVs here (needs --truth).
    #[arg(long, requires = "truth")]
    intervals_dir: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LiveArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Capture stream; a pcap path or - for standard input.
    #[arg(long)]
    iface: String,
    /// Replay faster than real time by this factor.
    #[arg(long, default_value_t = 1.0)]
    speedup: f64,
    /// Report file; standard output by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    interval_len: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 250)]
    sessions: usize,
    #[arg(long, default_value_t = 120.0)]
    secs: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// CSV of cidr,as_label.
    #[arg(long = "latency-by-as")]
    as_map: PathBuf,
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    csv: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainSignatures(a) => commands::train_signatures(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::Synth(a) => commands::synth(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Live(a) => commands::live(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", commands::describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
