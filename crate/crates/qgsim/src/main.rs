use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qgsim::driver::{run, SimConfig};
use qgsim::verify::{dtn_table, profile_table, verify_all, verify_module};

/// Simulator and verification suite for the singular quasi-geostrophic
/// system with Ekman pumping.
#[derive(Parser)]
#[command(name = "qgsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured coupled simulation.
    Simulate {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the property suites (all modules, or one).
    Verify {
        /// Module name (profile, zgrid, extension, elliptic, transport,
        /// boundary, driver).
        #[arg(long)]
        module: Option<String>,
    },
    /// Print the vertical profile W as CSV (w, W, W').
    Profile {
        /// Weight exponent, a < 1.
        #[arg(long)]
        a: f64,
    },
    /// Print measured vs analytic boundary symbols as CSV.
    DtnTable {
        /// Weight exponent, a < 1.
        #[arg(long)]
        a: f64,
        /// Number of modes.
        #[arg(long)]
        n: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> qgsim::Result<ExitCode> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg = SimConfig::from_path(&config)?;
            let result = run(cfg)?;
            println!(
                "completed {} steps to t = {} in {:.2} s",
                result.summary.steps, result.summary.final_t, result.summary.wall_time_s
            );
            println!(
                "final |F|_L2 = {:.6e}, |F|_Linf = {:.6e}, |theta|_L2 = {:.6e}",
                result.summary.final_f_l2,
                result.summary.final_f_linf,
                result.summary.final_theta_l2
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { module } => {
            let checks = match module {
                Some(m) => verify_module(&m)?,
                None => verify_all(),
            };
            let mut failed = 0;
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {}/{}: {}", c.module, c.name, c.detail);
                if !c.passed {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", checks.len(), failed);
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Profile { a } => {
            for line in profile_table(a)? {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DtnTable { a, n } => {
            for line in dtn_table(a, n)? {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
