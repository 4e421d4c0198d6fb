mod args;
mod commands;
mod run_dir;

use std::process::ExitCode;

use clap::Parser;
use cxr_sslx::ErrorKind;

use args::{Cli, Command};

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::SslPretrain(a) => commands::ssl_pretrain(a, cli.seed),
        Command::Finetune(a) => commands::finetune(a, cli.seed),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Explain(a) => commands::explain_cmd(a),
        Command::Report(a) => commands::report_cmd(a),
        Command::ExportBackbone(a) => commands::export_backbone(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
