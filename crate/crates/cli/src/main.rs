mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use slideseg_core::Error;
use tracing_subscriber::EnvFilter;

use crate::args::{Cli, Command};

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidInput(_) | Error::InvalidPrompt(_) | Error::InvalidParameters(_) | Error::Config(_) => {
                Failure::Usage(msg)
            }
            Error::CorruptData(_)
            | Error::InvalidSample(_)
            | Error::DegenerateVolume(_)
            | Error::IncompatibleWeights(_)
            | Error::Io(_)
            | Error::Json(_) => Failure::Data(msg),
            Error::TrainingFault(_) | Error::Tensor(_) => Failure::Runtime(msg),
        }
    }
}

pub struct Context {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub config: config::RunConfig,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = config::load(cli.config.as_deref(), &cli.overrides)?;
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        jobs: cli.jobs.or(config.jobs),
        config,
    };
    if let Some(jobs) = ctx.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Preprocess(a) => commands::preprocess(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Pseudo(a) => commands::pseudo(&ctx, a),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
