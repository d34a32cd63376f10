//! Command-line front end.

mod commands;
mod config;

use std::process::ExitCode;

use config::{command, RunConfig, UsageError, SUBCOMMANDS};

/// 2 usage, 3 data, 4 numerical abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<sgcontour::Error>() {
        Some(sgcontour::Error::NonFinite(_)) => 4,
        Some(sgcontour::Error::InvalidArgument(_)) => 2,
        _ => 3,
    }
}

fn run() -> anyhow::Result<()> {
    let matches = command().get_matches();
    let (name, sub_matches) = matches.subcommand().expect("subcommand required");
    let sub = SUBCOMMANDS.iter().find(|s| s.name == name).expect("known subcommand");
    let cfg = RunConfig::resolve(sub, sub_matches)?;
    match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train_cmd(&cfg),
        "eval" => commands::eval_cmd(&cfg),
        "segment" => commands::segment(&cfg),
        "ablate" => commands::ablate_cmd(&cfg),
        "jitter" => commands::jitter_cmd(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
