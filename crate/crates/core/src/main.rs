use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use growcl::driver::Mode;
use growcl::runner::{cmd_report, cmd_run, cmd_verify, exit_code, VerifyArgs};
use growcl::snapshot::write_atomic;

/// Sparse network growth for task-incremental continual learning.
#[derive(Parser)]
#[command(name = "growcl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one pipeline and write a run directory under the output root
    /// (`GROWCL_OUT` overrides the configured one).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Exhaustive attentive-mask sweep plus the gradient suites.
    Verify {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest configuration space enumerated per instance.
        #[arg(long, default_value_t = growcl::prop1::DEFAULT_BUDGET)]
        budget: u128,
        #[arg(long, default_value_t = 100)]
        grad_points: usize,
        /// Write the per-instance sweep table here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, hide = true)]
        plant_fault: bool,
    },
    /// Merge run directories into one comparison table on stdout.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, mode } => cmd_run(&config, mode).map(|dir| {
            println!("{}", dir.display());
            true
        }),
        Cmd::Verify {
            instances,
            seed,
            budget,
            grad_points,
            csv,
            plant_fault,
        } => {
            let args = VerifyArgs {
                instances,
                seed,
                budget,
                grad_points,
                plant_fault: plant_fault || VerifyArgs::default().plant_fault,
            };
            cmd_verify(args).and_then(|out| {
                let s = &out.sweep;
                for r in s.rows.iter().filter(|r| r.error.is_some()) {
                    eprintln!(
                        "instance {}: {}",
                        r.instance,
                        r.error.as_deref().unwrap_or("")
                    );
                }
                println!(
                    "prop1: {} instances, {} failures, {} strict ({:.1}%){}",
                    s.rows.len(),
                    s.failures,
                    s.strict,
                    100.0 * s.strict as f64 / s.rows.len() as f64,
                    if s.suspicious_equality {
                        ", suspicious equality"
                    } else {
                        ""
                    }
                );
                for g in &out.suites {
                    println!(
                        "grad {:<15} {} points, max rel err {:.3e} {}",
                        g.name,
                        g.points,
                        g.max_rel_error,
                        if g.pass { "ok" } else { "FAIL" }
                    );
                }
                if let Some(p) = csv {
                    write_atomic(&p, s.to_csv().as_bytes())?;
                }
                Ok(out.ok())
            })
        }
        Cmd::Report { dirs } => cmd_report(&dirs).map(|t| {
            print!("{t}");
            true
        }),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
