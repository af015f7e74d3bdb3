//! The `terrapref` command-line interface and HTTP service.
//!
//! [`run`] parses arguments, dispatches to a command and maps the outcome
//! to an exit code: 0 on success, 1 for usage errors, 2 for runtime errors.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod server;
pub mod tiles;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use terrapref::par::ExecMode;

pub use args::{Cli, Command};
pub use artifacts::CliError;

pub fn dispatch(cli: &Cli) -> artifacts::Result<()> {
    let exec = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match &cli.command {
        Command::GenWorld(a) => commands::gen_world(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Featurize(a) => commands::featurize(a, exec),
        Command::TrainSterling(a) => commands::train_sterling_cmd(a),
        Command::Cluster(a) => commands::cluster(a, exec),
        Command::Rank(a) => commands::rank(a),
        Command::TrainUtility(a) => commands::train_utility_cmd(a),
        Command::TrainPatern(a) => commands::train_patern_cmd(a),
        Command::DetectNovel(a) => commands::detect_novel(a),
        Command::Adapt(a) => commands::adapt_cmd(a),
        Command::Plan(a) => commands::plan(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Serve(a) => server::serve(a, exec),
    }
}

/// Parse `args` (program name first), run the command and return the exit
/// code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
