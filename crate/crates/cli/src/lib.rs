//! Command-line pipeline over `semsplat-core`.

pub mod args;
pub mod commands;
pub mod config;
pub mod demo;
pub mod features;
pub mod png;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};

use crate::args::{Cli, Command};
use crate::commands::CheckFailed;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

/// Bad command line; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.trim_end())
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else if err.downcast_ref::<CheckFailed>().is_some() {
        EXIT_CHECK
    } else {
        EXIT_DATA
    }
}

fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    cmd = cmd.mut_subcommands(|s| s.args_override_self(true));
    cmd.build();
    cmd
}

/// `Ok(None)` when help or version was printed.
pub fn parse(argv: &[String]) -> Result<Option<Cli>> {
    let usage = |e: clap::Error| -> Result<Option<Cli>> {
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{}", e.render());
                Ok(None)
            }
            _ => Err(UsageError(e.render().to_string()).into()),
        }
    };
    let cmd = command();
    let first = match cmd.clone().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => return usage(e),
    };
    let matches = match first.get_one::<std::path::PathBuf>("config") {
        None => first,
        Some(path) => {
            let (name, _) = first.subcommand().expect("subcommand is required");
            let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
            let cfg = config::load_config(path)?;
            let extra = config::config_args(sub, &cfg).map_err(|e| UsageError(format!("{e:#}")))?;
            let spliced =
                config::splice_after_subcommand(argv, name, &["--config", "--threads"], extra);
            match cmd.clone().try_get_matches_from(&spliced) {
                Ok(m) => m,
                Err(e) => return usage(e),
            }
        }
    };
    Ok(Some(
        Cli::from_arg_matches(&matches).map_err(|e| UsageError(e.to_string()))?,
    ))
}

pub fn run(argv: &[String]) -> Result<()> {
    let Some(cli) = parse(argv)? else {
        return Ok(());
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()?;
    pool.install(|| match &cli.command {
        Command::Lift(a) => commands::cmd_lift(a),
        Command::Optimize(a) => commands::cmd_optimize(a),
        Command::Render(a) => commands::cmd_render(a),
        Command::Detect(a) => commands::cmd_detect(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Sample(a) => commands::cmd_sample(a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a),
        Command::Demo(a) => commands::cmd_demo(a),
    })
}
