use clap::{Parser, Subcommand};
use cmpsim_cli::commands::{self, Outcome};
use cmpsim_cli::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cmpsim", version, about = "Quantum-field simulation pipeline on a driven cavity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cache directory for landscape points.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the (alpha, Omega) landscape.
    Landscape,
    /// cMPS reference ladders over v_tilde and bond dimension.
    CmpsSolve,
    /// Ground states across v on the simulated landscape.
    InteractionScan,
    /// Synthesize and analyse heterodyne traces.
    Traces,
    /// Spectroscopy fit, voltage map, tuner and efficiency.
    Calibrate,
    /// Landscape plus interaction scan with a JSON digest.
    Report,
}

fn run(cli: &Cli) -> Result<Outcome, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = &cli.cache {
        cfg.cache_dir = Some(c.clone());
    }
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| e.to_string())?;
    commands::prepare_output(&cfg)?;
    let mut out = Outcome::default();
    match cli.command {
        Command::Landscape => {
            let r = commands::run_landscape(&cfg, &mut out)?;
            eprintln!("landscape: {} points, {} from cache", r.records.len(), r.cache_hits);
        }
        Command::CmpsSolve => {
            let rows = commands::run_cmps(&cfg, &mut out)?;
            eprintln!("cmps-solve: {} rows", rows.len());
        }
        Command::InteractionScan => {
            let r = commands::run_landscape(&cfg, &mut out)?;
            let rows = commands::run_scan(&cfg, &r, &mut out)?;
            eprintln!("interaction-scan: {} ground states", rows.len());
        }
        Command::Traces => {
            let s = commands::run_traces(&cfg)?;
            eprintln!("traces: g2(0) = {:.3} +- {:.3}", s.g2_zero, s.g2_zero_se);
        }
        Command::Calibrate => commands::run_calibrate(&cfg, &mut out)?,
        Command::Report => {
            let r = commands::run_report(&cfg, &mut out)?;
            eprintln!("report: {} points, {} minima", r.grid_points, r.minima.len());
        }
    }
    commands::finish(&cfg, &out)?;
    for f in &out.failures {
        eprintln!("failed: {}: {}", f.item, f.error);
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => ExitCode::from(out.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
