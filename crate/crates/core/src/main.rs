use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use endpoint_ddp::harness::{cold_start_campaign, compare_factorizations, form_name, run, RunConfig};

#[derive(Parser)]
#[command(name = "endpoint-ddp", version, about = "Endpoint-constrained DDP benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve once; write trace.csv, trace.manifest.json and summary.json.
    Run(Common),
    /// Time the endpoint factorizations from one shared warm start.
    Compare(Common),
    /// Seeded cold-start trials for both dynamics forms.
    Campaign(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (overrides the config file).
    #[arg(short, long, env = "ENDPOINT_DDP_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
}

impl Common {
    fn load(&self) -> endpoint_ddp::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(d) = &self.out_dir {
            cfg.output.dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cmd: &Command) -> endpoint_ddp::Result<()> {
    match cmd {
        Command::Run(c) => {
            let cfg = c.load()?;
            let out = run(&cfg)?;
            let s = &out.summary;
            println!(
                "{} {}: {:?} after {} iterations, endpoint l1 {:.3e}, cost {:.6}, {:.3}s",
                s.family,
                form_name(s.form),
                s.status,
                s.iterations,
                s.final_endpoint_l1,
                s.final_cost,
                s.total_seconds
            );
            println!("trace: {}", out.trace_path.display());
            println!("summary: {}", out.summary_path.display());
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            let report = compare_factorizations(&cfg)?;
            println!("{:<8} {:<34} {:>5} {:>14} {:>14} {:>10}", "variant", "outcome", "iters", "mean dir [s]", "min dir [s]", "max dev");
            for v in &report.variants {
                println!(
                    "{:<8} {:<34} {:>5} {:>14.3e} {:>14.3e} {:>10.2e}",
                    v.variant.name(),
                    v.outcome,
                    v.iterations,
                    v.mean_direction_seconds,
                    v.min_direction_seconds,
                    v.max_deviation
                );
            }
            println!("trajectories agree: {}", report.trajectories_agree);
        }
        Command::Campaign(c) => {
            let cfg = c.load()?;
            let rows = cold_start_campaign(&cfg)?;
            println!("{:<12} {:<8} {:>8} {:>10} {:>14}", "family", "form", "success", "mean iter", "mean feas");
            for r in &rows {
                println!(
                    "{:<12} {:<8} {:>7.0}% {:>10.1} {:>14.3e}",
                    r.family,
                    form_name(r.form),
                    100.0 * r.success_rate,
                    r.mean_iterations,
                    r.mean_final_endpoint_l1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
