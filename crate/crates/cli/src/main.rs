//! `dsmrefine` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use commands::*;

#[derive(Debug, Parser)]
#[command(name = "dsmrefine", version, about = "Refine digital surface models with ortho-image guidance")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config for the subcommand; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; RESDEPTH_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic city with its corrupted DSM and rendered views.
    Synth(SynthArgs),
    /// Select stereo pairs from an image metadata table.
    Pairs(PairsArgs),
    /// Rasterize a point cloud into a gap-free DSM.
    Fuse(FuseArgs),
    /// Ortho-rectify an image onto a DSM.
    Ortho(OrthoArgs),
    /// Fit normalization statistics on a dataset manifest.
    Normfit(NormfitArgs),
    /// Train a refinement network.
    Train(TrainArgs),
    /// Refine a DSM with one checkpoint or a cascade.
    Refine(RefineArgs),
    /// Compare a DSM with a reference.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pairs(_) => "pairs",
            Command::Fuse(_) => "fuse",
            Command::Ortho(_) => "ortho",
            Command::Normfit(_) => "normfit",
            Command::Train(_) => "train",
            Command::Refine(_) => "refine",
            Command::Eval(_) => "eval",
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    status: &'static str,
    subcommand: &'a str,
    kind: &'a str,
    message: String,
    exit_code: u8,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    match std::env::var("RESDEPTH_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("RESDEPTH_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.global.threads)? {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Pairs(a) => pairs(g, a),
        Command::Fuse(a) => fuse(g, a),
        Command::Ortho(a) => ortho(g, a),
        Command::Normfit(a) => normfit(g, a),
        Command::Train(a) => train(g, a),
        Command::Refine(a) => refine(g, a),
        Command::Eval(a) => eval(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.global.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let record = ErrorRecord { status: "error", subcommand: name, kind: e.kind(), message: e.to_string(), exit_code: code };
            eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
            ExitCode::from(code)
        }
    }
}
