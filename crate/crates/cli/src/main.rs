// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trust_transfer_cli::{
    evaluate, render_sizes, size_rows, ScenarioConfig, EXIT_CONFIG, EXIT_EXPECTATION, EXIT_PASS,
};

/// Runs trust-transfer scenarios in the deterministic network simulator.
#[derive(Debug, Parser)]
#[command(name = "trust-transfer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and report each device's final phase and issuer.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print encoded sizes of the hand-over messages.
    Sizes { config: PathBuf },
    /// Run every *.toml scenario in a directory.
    AttackSuite { dir: PathBuf },
}

fn load(path: &Path) -> Result<ScenarioConfig, i32> {
    ScenarioConfig::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_CONFIG
    })
}

fn run(config: &Path, seed: Option<u64>, trace: Option<&Path>) -> i32 {
    let config = match load(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let seed = seed.unwrap_or(config.seed);
    let eval = match evaluate(&config, seed) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    print!("{}", eval.report.render());
    if let Some(path) = trace {
        if let Err(e) = std::fs::write(path, eval.trace.to_text()) {
            eprintln!("error: cannot write trace to {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    }
    if eval.passed() {
        println!("result: pass");
        EXIT_PASS
    } else {
        for f in &eval.failures {
            println!("unexpected: {f}");
        }
        println!("result: fail");
        EXIT_EXPECTATION
    }
}

fn sizes(config: &Path) -> i32 {
    let config = match load(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match size_rows(&config) {
        Ok(rows) => {
            print!("{}", render_sizes(&rows));
            EXIT_PASS
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn attack_suite(dir: &Path) -> i32 {
    let entries = match std::fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) => {
            eprintln!("error: {}: {e}", dir.display());
            return EXIT_CONFIG;
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        eprintln!("error: no *.toml scenarios in {}", dir.display());
        return EXIT_CONFIG;
    }
    let mut worst = EXIT_PASS;
    for path in &paths {
        let config = match load(path) {
            Ok(c) => c,
            Err(code) => {
                println!("ERROR {}", path.display());
                worst = worst.max(code);
                continue;
            }
        };
        match evaluate(&config, config.seed) {
            Ok(eval) if eval.passed() => {
                println!(
                    "PASS  {} ({} devices, adversary {})",
                    config.name, config.scenario.device_count, config.scenario.adversary.name
                );
            }
            Ok(eval) => {
                println!("FAIL  {}: {}", config.name, eval.failures.join("; "));
                worst = worst.max(EXIT_EXPECTATION);
            }
            Err(e) => {
                println!("ERROR {}: {e}", config.name);
                worst = worst.max(EXIT_CONFIG);
            }
        }
    }
    worst
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            seed,
            trace,
        } => run(&config, seed, trace.as_deref()),
        Command::Sizes { config } => sizes(&config),
        Command::AttackSuite { dir } => attack_suite(&dir),
    };
    ExitCode::from(code as u8)
}
