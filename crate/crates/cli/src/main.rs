// SPDX-License-Identifier: Apache-2.0
use clap::error::ErrorKind;
use clap::Parser;
use warpforge_cli::commands::{run, Cli};
use warpforge_cli::error::CliError;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let err = CliError::Input(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(Some(doc)) => println!("{}", serde_json::to_string_pretty(&doc).expect("json serializes")),
        Ok(None) => {}
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
