use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lvcal::commands::{cmd_calibrate, cmd_generate_market, cmd_verify, Status, INSTRUMENTS_FILE, SURFACE_FILE};
use lvcal::report::cmd_report;
use lvcal::RunConfig;

#[derive(Parser)]
#[command(
    name = "lvcal",
    version,
    about = "Local volatility calibration by multi-marginal Sinkhorn"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo seed (overrides seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo path count (overrides verify.paths).
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Run a single scale with this many steps instead of the ladder.
    #[arg(long, global = true, value_name = "N_T")]
    scale_override: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Price the SSVI strike ladder and write instruments.csv.
    GenerateMarket,
    /// Calibrate the ladder to an instrument table.
    Calibrate {
        /// Instrument table (default: <out>/instruments.csv).
        #[arg(long)]
        instruments: Option<PathBuf>,
    },
    /// Reprice the instruments by simulation on a calibrated surface.
    Verify {
        /// Surface table (default: <out>/surface.csv).
        #[arg(long)]
        surface: Option<PathBuf>,
        /// Instrument table (default: <out>/instruments.csv).
        #[arg(long)]
        instruments: Option<PathBuf>,
    },
    /// Merge residual logs into convergence.csv.
    Report {
        /// Residual logs (default: every residuals_n*.csv in <out>).
        inputs: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.out {
        cfg.output.dir = d.clone();
    }
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(n) = c.paths {
        cfg.verify.paths = n;
    }
    if let Some(n) = c.scale_override {
        cfg.ladder.step_counts = vec![n];
    }
    cfg.validate().context("after command-line overrides")?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<Status> {
    let cfg = load_config(&cli.common)?;
    let level = cfg.output.verbosity.parse().unwrap_or(log::LevelFilter::Info);
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let dir = cfg.output.dir.clone();
    let start = Instant::now();
    let status = match cli.command {
        Command::GenerateMarket => {
            let p = cmd_generate_market(&cfg, &dir)?;
            println!("wrote {}", p.display());
            Status::Complete
        }
        Command::Calibrate { instruments } => {
            let ins = instruments.unwrap_or_else(|| dir.join(INSTRUMENTS_FILE));
            let out = cmd_calibrate(&cfg, &ins, &dir)?;
            for s in &out.scales {
                println!(
                    "N_T={:<4} converged={:<5} sweeps={:<5} price_l2={:.3e} mart_l2={:.3e} max_rel={:.3e} max_iv={:.3e} time={:.2}s",
                    s.n_steps,
                    s.converged,
                    s.sweeps,
                    s.price_err_l2,
                    s.mart_err_l2,
                    s.max_rel_price_err,
                    s.max_iv_err,
                    s.elapsed_secs
                );
            }
            out.status()
        }
        Command::Verify { surface, instruments } => {
            let surf = surface.unwrap_or_else(|| dir.join(SURFACE_FILE));
            let ins = instruments.unwrap_or_else(|| dir.join(INSTRUMENTS_FILE));
            let rows = cmd_verify(&cfg, &surf, &ins, &dir)?;
            let worst = rows
                .iter()
                .map(|r| (r.mc_iv - r.calibrated_iv).abs())
                .fold(0.0, f64::max);
            println!(
                "repriced {} instruments, max |mc_iv - calibrated_iv| = {worst:.3e}",
                rows.len()
            );
            Status::Complete
        }
        Command::Report { inputs } => {
            let r = cmd_report(&dir, &inputs)?;
            for (p, why) in &r.skipped {
                eprintln!("skipped {}: {why}", p.display());
            }
            println!(
                "wrote {} ({} rows, {} scales, {} boundaries)",
                r.path.display(),
                r.rows,
                r.scales.len(),
                r.boundaries
            );
            r.status()
        }
    };
    println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    Ok(status)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(s) => ExitCode::from(s.exit_code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
