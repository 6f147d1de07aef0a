use std::path::PathBuf;
use std::process::ExitCode;

use bwnn::cli_io::{emit, error_exit_code, error_json, parse_config, parse_flags, run_command};
use clap::Parser;

/// Binary-weight network experiments: quasi-network checks, training,
/// kernels and spectra.
#[derive(Parser, Debug)]
#[command(name = "bwnn", version, trailing_var_arg = true)]
struct Cli {
    /// verify-quasi | gradcheck | train | ntk | spectrum | drift | compare
    command: String,
    /// JSON object of settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Settings as --key value or --key=value.
    #[arg(allow_hyphen_values = true)]
    settings: Vec<String>,
}

fn fail(e: &bwnn::Error) -> ExitCode {
    eprintln!("{}", error_json(e));
    ExitCode::from(error_exit_code(e) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let file = match &cli.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(s) => Some(s),
            Err(e) => return fail(&bwnn::Error::Io(e)),
        },
        None => None,
    };
    let mut flags = match parse_flags(&cli.settings) {
        Ok(f) => f,
        Err(e) => return fail(&e),
    };
    flags.insert(0, ("command".into(), cli.command.clone()));
    let cfg = match parse_config(file.as_deref(), &flags) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let outcome = match run_command(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = emit(&cfg, &outcome) {
        return fail(&e);
    }
    println!("{}", serde_json::to_string_pretty(&outcome.report).unwrap_or_default());
    if !outcome.passed() {
        let failures: Vec<_> = outcome.failures().iter().map(|c| &c.name).collect();
        eprintln!("{}", serde_json::json!({ "failures": failures }));
    }
    ExitCode::from(outcome.exit_code() as u8)
}
