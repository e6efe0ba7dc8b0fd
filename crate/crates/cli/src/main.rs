// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flexheg_cli::{load_scenario, run_scenario, trust_roots_document, verify_claim, CliError, VerifyError, BUNDLED};

const EXIT_FAIL: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "flexheg", version, about = "Guarantee-processor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        scenario: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write claims/<label>.bin and trust_roots.json here.
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
    /// Verify a claim offline.
    Verify {
        claim: PathBuf,
        #[arg(long)]
        trust_roots: PathBuf,
    },
    /// List bundled scenarios.
    ListScenarios,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run { scenario, out, seed, export_dir } => run(&scenario, out, seed, export_dir),
        Command::Verify { claim, trust_roots } => verify(&claim, &trust_roots),
        Command::ListScenarios => {
            let mut stdout = std::io::stdout().lock();
            for (name, _) in BUNDLED {
                // A closed pipe (`| head`) is not an error worth reporting.
                if writeln!(stdout, "{name}").is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
    }
}

fn input_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_INPUT)
}

fn write(path: &PathBuf, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn run(scenario: &str, out: Option<PathBuf>, seed: Option<u64>, export_dir: Option<PathBuf>) -> ExitCode {
    let scenario = match load_scenario(scenario) {
        Ok(s) => s,
        Err(e) => return input_error(e),
    };
    let (report, artifacts) = match run_scenario(&scenario, seed) {
        Ok(r) => r,
        Err(e) => return input_error(e),
    };
    let json = report.to_json();
    match &out {
        Some(path) => {
            if let Err(e) = write(path, json.as_bytes()) {
                return input_error(e);
            }
        }
        None => {
            let _ = std::io::stdout().lock().write_all(json.as_bytes());
        }
    }
    if let Some(dir) = export_dir {
        let claims = dir.join("claims");
        if let Err(e) = std::fs::create_dir_all(&claims) {
            return input_error(format!("{}: {e}", claims.display()));
        }
        for (label, bytes) in &artifacts.claims {
            let name = label.replace(['/', '\\', '#'], "_");
            if let Err(e) = write(&claims.join(format!("{name}.bin")), hex::encode(bytes).as_bytes()) {
                return input_error(e);
            }
        }
        let roots = serde_json::to_string_pretty(&trust_roots_document(&artifacts)).expect("roots serialize");
        if let Err(e) = write(&dir.join("trust_roots.json"), roots.as_bytes()) {
            return input_error(e);
        }
    }
    for a in report.assertions.iter().filter(|a| !a.passed) {
        eprintln!("assertion {} failed: {}", a.index, a.detail);
    }
    for t in report.trace.iter().filter(|t| t.expect_met == Some(false)) {
        eprintln!("event {} at {} ms: expected {}, got {}", t.seq, t.at_ms, t.expect.as_deref().unwrap_or(""), t.outcome);
    }
    if report.summary.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn verify(claim: &PathBuf, roots: &PathBuf) -> ExitCode {
    let claim_bytes = match std::fs::read(claim) {
        Ok(b) => b,
        Err(e) => return input_error(format!("{}: {e}", claim.display())),
    };
    let roots_text = match std::fs::read_to_string(roots) {
        Ok(t) => t,
        Err(e) => return input_error(format!("{}: {e}", roots.display())),
    };
    match verify_claim(&claim_bytes, &roots_text) {
        Ok(c) => {
            let attesters: Vec<String> = c.attesters().iter().map(|a| a.0.to_hex()).collect();
            println!("valid {} claim, attested by {}", c.kind(), attesters.join(", "));
            ExitCode::SUCCESS
        }
        Err(VerifyError::Rejected(e)) => {
            println!("invalid: {e}");
            ExitCode::from(EXIT_FAIL)
        }
        Err(VerifyError::Input(e)) => input_error(e),
    }
}
