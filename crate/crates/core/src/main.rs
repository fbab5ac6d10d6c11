use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vid_core::config::PipelineConfig;
use vid_core::pipeline::{ErrorCode, Pipeline, Stage, StageError};

/// Virtual ID pipeline stages.
#[derive(Parser, Debug)]
#[command(name = "vid", version)]
struct Cli {
    /// synth | ingest | graph | embed | cluster | map | mine | train-category |
    /// train-feature | eval-category | eval-retrieval | e2e
    stage: Stage,
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 runs everything on the calling thread).
    #[arg(long)]
    threads: Option<usize>,
    /// Abort on the first malformed log line instead of skipping it.
    #[arg(long)]
    strict: bool,
    /// Output root.
    #[arg(long)]
    out: PathBuf,
    /// Print the effective config and exit.
    #[arg(long)]
    dump_config: bool,
}

fn fail(stage: Stage, code: ErrorCode, message: impl ToString) -> ExitCode {
    let e = StageError { stage: stage.as_str(), code, message: message.to_string() };
    eprintln!("{e}");
    ExitCode::from(code.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VID_LOG", "warn")).init();
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match PipelineConfig::parse(&text) {
                Ok(c) => c,
                Err(e) => return fail(cli.stage, ErrorCode::InvalidConfig, format!("{}: {e}", path.display())),
            },
            Err(e) => return fail(cli.stage, ErrorCode::MissingInput, format!("{}: {e}", path.display())),
        },
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if let Err(e) = config.set("run.seed", &seed.to_string()) {
            return fail(cli.stage, ErrorCode::InvalidConfig, e);
        }
    }
    if cli.dump_config {
        print!("{}", config.dump());
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(cli.stage, ErrorCode::InvalidConfig, "--threads must be >= 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(cli.stage, ErrorCode::Io, e);
        }
    }

    let pipeline = Pipeline::new(config, cli.out, cli.strict);
    match pipeline.run(cli.stage) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code.exit_code() as u8)
        }
    }
}
