mod args;
mod commands;
mod run_dir;
mod selftest;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;
use pcl_core::PclError;

use args::{Cli, Command};

/// Bad input from the user: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || c.downcast_ref::<PclError>().is_some_and(PclError::is_usage)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a).map(|()| true),
        Command::Pretrain(a) => commands::pretrain(a).map(|()| true),
        Command::Tune(a) => commands::tune(a).map(|()| true),
        Command::Coldstart(a) => commands::coldstart(a).map(|()| true),
        Command::Export(a) => commands::export(a).map(|()| true),
        Command::Report(a) => commands::report(a).map(|()| true),
        Command::Selftest => selftest::run().map(|ok| {
            if !ok {
                eprintln!("selftest: some checks failed");
            }
            ok
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
