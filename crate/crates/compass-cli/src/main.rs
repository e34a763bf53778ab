//! `compass` — layered arbitrary-scale image codec.
//!
//! One stream holds a small base image plus any number of enhancement
//! layers at arbitrary larger sizes; cutting the stream after any layer
//! leaves a valid stream for every layer up to the cut.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

mod commands;
mod util;

use clap::Parser;

use commands::{DecodeArgs, EncodeArgs, EvalArgs, ReportArgs, TrainArgs};
use util::AppError;

#[derive(Parser, Debug)]
#[command(
    name = "compass",
    version,
    about = "Layered arbitrary-scale image codec",
    propagate_version = true,
    args_override_self = true
)]
struct Cli {
    /// key=value file of defaults for the subcommand's flags; flags given
    /// on the command line override the file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Subcommand, Debug)]
enum Cmd {
    /// Train one model stage over an image folder
    Train(TrainArgs),
    /// Encode an image into a layered, prefix-decodable stream
    Encode(EncodeArgs),
    /// Decode some or all layers of a stream back to images
    Decode(DecodeArgs),
    /// Measure rate and quality of models over an image folder
    Eval(EvalArgs),
    /// Compare two measurement CSVs by their average rate difference
    Report(ReportArgs),
}

const SUBCOMMANDS: [&str; 5] = ["train", "encode", "decode", "eval", "report"];

/// Expand `--config FILE` into flags inserted right after the subcommand
/// token, so flags typed on the command line come later and win.
fn merge_config_file(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut config_path: Option<String> = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = &argv[i];
        if arg == "--config" {
            match argv.get(i + 1) {
                Some(v) => config_path = Some(v.clone()),
                None => return Err("missing value for --config".into()),
            }
            i += 2;
            continue;
        }
        if let Some(v) = arg.strip_prefix("--config=") {
            config_path = Some(v.to_string());
        }
        i += 1;
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let Some(sub_at) = argv
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| SUBCOMMANDS.contains(&a.as_str()))
        .map(|(i, _)| i)
    else {
        return Ok(argv);
    };

    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config file {path}: {e}"))?;
    let mut derived: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "{path}:{}: expected key=value, got {line:?}",
                lineno + 1
            ));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            return Err(format!("{path}:{}: empty key", lineno + 1));
        }
        if key == "config" {
            return Err(format!(
                "{path}:{}: a config file cannot set \"config\"",
                lineno + 1
            ));
        }
        derived.push(format!("--{key}"));
        derived.push(value.to_string());
    }

    let mut merged = argv;
    merged.splice(sub_at + 1..sub_at + 1, derived);
    Ok(merged)
}

fn run(argv: Vec<String>) -> i32 {
    let argv = match merge_config_file(argv) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Cmd::Train(a) => commands::train(a),
        Cmd::Encode(a) => commands::encode(a),
        Cmd::Decode(a) => commands::decode(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => 0,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(AppError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args().collect()));
}
