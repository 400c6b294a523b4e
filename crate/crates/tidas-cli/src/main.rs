use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use log::info;
use tidas_core::experiments::{self, ExperimentConfig};

mod config;

/// Time-invariant delay-and-sum experiments on simulated RF data.
#[derive(Debug, Parser)]
#[command(name = "tidas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted `key=value` settings applied after the config file, e.g. `grid.count=50`.
    #[arg(long, global = true, num_args = 1.., value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory. Defaults to the config value, then `TIDAS_OUT`, then `tidas_out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate the RF frame of one scatterer at `depth`.
    Simulate,
    /// DAS and tiDAS PSFs of one scatterer at `depth` with the profile at `reference_depth`.
    Psf,
    /// θ for every (reference, target) pair of the depth grid.
    Theta,
    /// θ, local and global errors and the below-threshold mask.
    SweepErrors,
    /// Peak heights and FWHM over every frequency, focus and depth.
    SweepFwhm,
    /// Multi-scatterer lines and the side-lobe table.
    Line,
    /// DAS versus tiDAS timings.
    Bench,
    /// Every experiment family in order, then the timings.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Psf => "psf",
            Command::Theta => "theta",
            Command::SweepErrors => "sweep-errors",
            Command::SweepFwhm => "sweep-fwhm",
            Command::Line => "line",
            Command::Bench => "bench",
            Command::All => "all",
        }
    }
}

fn run(command: Command, cfg: &ExperimentConfig) -> tidas_core::Result<String> {
    Ok(match command {
        Command::Simulate => {
            let base = experiments::run_simulate(cfg)?;
            format!("frame written to {}.json / .f32", base.display())
        }
        Command::Psf => {
            let out = experiments::run_psf(cfg)?;
            format!(
                "theta = {:.6}, local error = {:.4e}, global error = {:.4e}",
                out.theta, out.report.local_error, out.report.global_error
            )
        }
        Command::Theta => {
            let m = experiments::run_theta_sweep(cfg)?;
            let (r, t) = m.shape();
            format!("theta matrix {r}x{t}")
        }
        Command::SweepErrors => {
            let out = experiments::run_error_sweep(cfg)?;
            let (r, t) = out.theta.shape();
            format!("error maps {r}x{t}")
        }
        Command::SweepFwhm => {
            let out = experiments::run_peak_fwhm_sweep(cfg)?;
            let medians: Vec<String> = out
                .summary
                .iter()
                .map(|s| {
                    format!(
                        "{:.0} MHz / {:.0} mm: {:.2}%",
                        s.center_frequency / 1e6,
                        s.focus_depth * 1e3,
                        100.0 * s.median
                    )
                })
                .collect();
            format!("{} rows; median FWHM differences {}", out.rows.len(), medians.join(", "))
        }
        Command::Line => {
            let out = experiments::run_line_experiments(cfg)?;
            format!("{} lines, {} side-lobe rows", out.lines.len(), out.sidelobes.len())
        }
        Command::Bench => {
            let rows = experiments::run_bench(cfg)?;
            rows.iter()
                .map(|r| format!("{}: ratio {:.2}", r.experiment, r.ratio))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::All => {
            experiments::run_all(cfg)?;
            "all experiments finished".into()
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let env_out = std::env::var_os("TIDAS_OUT").map(PathBuf::from);
    let layers = config::Layers {
        config_path: cli.config.as_deref(),
        overrides: &cli.overrides,
        output_dir: cli.out.clone(),
        workers: cli.workers,
        env_output_dir: env_out,
    };
    let cfg = match config::resolve(&layers) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}\n");
            eprintln!("{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let command = cli.command;
    info!("running {} into {}", command.name(), cfg.output_dir.display());
    let result = experiments::write_manifest(&cfg, command.name())
        .and_then(|()| experiments::with_workers(cfg.parallel_workers, || run(command, &cfg))?);
    match result {
        Ok(summary) => {
            println!("{summary}");
            println!("outputs in {}", cfg.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {} failed: {e}", command.name());
            ExitCode::from(1)
        }
    }
}
