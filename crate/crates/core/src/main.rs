use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chordsim::scenario::fuzz::{fuzz_campaign, FuzzConfig};
use chordsim::scenario::run::{run_scenario, RunOptions};
use chordsim::scenario::{parse_scenario, trace};
use chordsim::Mode;

#[derive(Parser)]
#[command(name = "chordsim", about = "Step-synchronous Chord ring simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        file: PathBuf,
        #[arg(long, default_value_t = Mode::Regular)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        max_steps: u64,
        /// Write the step trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Include finger tables in trace rows.
        #[arg(long)]
        verbose_fingers: bool,
    },
    /// Generate and check random schedules.
    Fuzz {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Mode::Regular)]
        mode: Mode,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Consecutive seeds to run, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        #[arg(long, default_value_t = 4)]
        ring_bits: u32,
    },
    /// Re-run a recorded trace and compare byte for byte.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn read(path: &PathBuf) -> Result<String, ExitCode> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn write(path: &PathBuf, text: &str) -> Result<(), ExitCode> {
    fs::write(path, text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn run(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Run {
            file,
            mode,
            seed,
            max_steps,
            trace,
            verbose_fingers,
        } => {
            let text = read(&file)?;
            let scenario = parse_scenario(&text).map_err(|e| {
                eprintln!("error: {}: {e}", file.display());
                ExitCode::from(2)
            })?;
            let opts = RunOptions {
                mode,
                seed,
                max_steps,
                verbose_fingers,
            };
            let report = run_scenario(&scenario, &opts);
            if let Some(path) = trace {
                write(&path, &report.trace)?;
            }
            for e in &report.errors {
                eprintln!("error: {e}");
            }
            for a in report.failed_assertions() {
                eprintln!("assertion failed at step {}: {}", a.step, a.description);
            }
            for v in &report.violations {
                println!("{v}");
            }
            println!(
                "exit={} steps={} nodes={} violations={}",
                report.status.code(),
                report.steps,
                report.world.live().len(),
                report.violations.len()
            );
            Ok(ExitCode::from(report.status.code() as u8))
        }
        Command::Fuzz {
            nodes,
            events,
            seed,
            mode,
            report,
            runs,
            ring_bits,
        } => {
            if chordsim::RingConfig::new(ring_bits).is_err() || nodes == 0 {
                eprintln!("error: --ring-bits must be in 1..=24 and --nodes at least 1");
                return Err(ExitCode::from(2));
            }
            let mut cfg = FuzzConfig::new(nodes, events, seed, mode);
            cfg.ring_bits = ring_bits;
            let reports = fuzz_campaign(&cfg, runs);
            let mut text = String::new();
            let mut code = 0u8;
            for r in &reports {
                text.push_str(&r.render());
                if r.not_converged > 0 {
                    code = code.max(3);
                } else if mode == Mode::Regular && !r.clean() {
                    code = code.max(1);
                }
                println!(
                    "seed={} violations={} not_converged={} max_rounds={}",
                    r.config.seed,
                    r.violations.len(),
                    r.not_converged,
                    r.max_rounds()
                );
            }
            match report {
                Some(path) => write(&path, &text)?,
                None if code != 0 => print!("{text}"),
                None => {}
            }
            Ok(ExitCode::from(code))
        }
        Command::Replay { trace: path } => {
            let recorded = read(&path)?;
            let (header, scenario) = trace::parse_header(&recorded).map_err(|e| {
                eprintln!("error: {}: {e}", path.display());
                ExitCode::from(2)
            })?;
            let opts = RunOptions {
                mode: header.mode,
                seed: header.seed,
                max_steps: header.max_steps,
                verbose_fingers: header.verbose,
            };
            let again = run_scenario(&scenario, &opts).trace;
            if again == recorded {
                println!("replay identical ({} bytes)", recorded.len());
                return Ok(ExitCode::SUCCESS);
            }
            let mut a = recorded.lines();
            let mut b = again.lines();
            let mut line = 1;
            loop {
                match (a.next(), b.next()) {
                    (Some(x), Some(y)) if x == y => line += 1,
                    (x, y) => {
                        eprintln!("replay differs at line {line}");
                        eprintln!("recorded: {}", x.unwrap_or("<end>"));
                        eprintln!("replayed: {}", y.unwrap_or("<end>"));
                        break;
                    }
                }
            }
            Ok(ExitCode::from(1))
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse()).unwrap_or_else(|code| code)
}
