//! `propneuron`: scan activations, build patterns, find property neurons and
//! edit FFN weights from the command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use propneuron::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "propneuron", version, about = "Property-neuron analysis and FFN surgery")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set coverage=0.9` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accumulate per-layer co-occurrence tables from activation dumps and labels.
    Scan(commands::ScanArgs),
    /// Select neurons per key and write binary activation patterns.
    Patterns(commands::PatternsArgs),
    /// Embed a pattern set with classical MDS and score group separation.
    Mds(commands::MdsArgs),
    /// Find group and property neurons from pattern sets.
    Neurons(commands::NeuronsArgs),
    /// Structurally prune FFN neurons, keeping protected ones.
    Prune(commands::PruneArgs),
    /// Zero the value rows of selected neurons.
    Erase(commands::EraseArgs),
    /// Run the encoder and dump per-layer FFN activations.
    Forward(commands::ForwardArgs),
    /// Write a planted-property fixture (model, inputs, labels, ground truth).
    Synth(commands::SynthArgs),
}

/// Misuse of the command line that clap cannot catch on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k, v)?;
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let config = resolve_config(&cli.global)?;
    match cli.command {
        Command::Scan(a) => commands::scan(a, config),
        Command::Patterns(a) => commands::patterns(a, config),
        Command::Mds(a) => commands::mds(a, config),
        Command::Neurons(a) => commands::neurons(a, config),
        Command::Prune(a) => commands::prune(a, config),
        Command::Erase(a) => commands::erase(a, config),
        Command::Forward(a) => commands::forward(a, config),
        Command::Synth(a) => commands::synth(a, config),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(propneuron::Error::Config(_)) = cause.downcast_ref::<propneuron::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Scan(_) => "scan",
            Command::Patterns(_) => "patterns",
            Command::Mds(_) => "mds",
            Command::Neurons(_) => "neurons",
            Command::Prune(_) => "prune",
            Command::Erase(_) => "erase",
            Command::Forward(_) => "forward",
            Command::Synth(_) => "synth",
        }
    }
}
