use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfham::experiment::{self, ExperimentConfig};
use selfham::spectra::SpectrumCache;
use selfham::Error;

/// Canonical-form comparisons for a small system coupled to a spin-chain
/// environment.
#[derive(Debug, Parser)]
#[command(name = "selfham", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Flat key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single disorder seed (overrides `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip the spectrum cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Sweep worker threads; 0 uses the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Permit total dimensions above the default cap.
    #[arg(long, global = true)]
    allow_large_dimension: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bare, renormalized and mean-field comparison at the first sweep point.
    Compare,
    /// Every point of the configured sweep, with scaling fits.
    Sweep,
    /// Full diagnostic tables at the first sweep point.
    Diagnose {
        /// Number of window states for perturbative widths.
        #[arg(long, default_value_t = 8)]
        width_states: usize,
        /// Probability tolerance defining the minimal width window.
        #[arg(long, default_value_t = 0.01)]
        eps_p: f64,
    },
    /// Inspect or clear the spectrum cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    List,
    Clear,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn load_config(g: &Global) -> selfham::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::parse_file(p).map_err(|e| e.context(p.display().to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seeds = vec![seed];
    }
    if g.no_cache {
        cfg.use_cache = false;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if g.allow_large_dimension {
        cfg.allow_large = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> u8 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_NUMERIC
    }
}

fn run(cli: Cli) -> selfham::Result<u8> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Compare => {
            cfg.prepare_output()?;
            let report = experiment::single_point_report(&cfg, experiment::run_comparison(&cfg));
            experiment::write_outputs(&cfg, &report)?;
            if let Some(f) = report.failures.first() {
                eprintln!("error: {}", f.message);
                return Ok(if f.config_error { EXIT_CONFIG } else { EXIT_NUMERIC });
            }
            let r = &report.points[0];
            println!(
                "D_bare={:.6} D_renorm={:.6} D_meanfield={:.6} iterations={} residual={:.3e}",
                r.d_bare, r.d_renorm, r.d_meanfield, r.iterations, r.residual
            );
            println!("wrote {}", cfg.output_dir.display());
            Ok(0)
        }
        Command::Sweep => {
            cfg.prepare_output()?;
            let report = experiment::run_sweep(&cfg)?;
            experiment::write_outputs(&cfg, &report)?;
            println!("{} points ok, {} failed", report.points.len(), report.failures.len());
            for f in &report.failures {
                eprintln!("failed: {}", f.message);
            }
            for fit in &report.fits {
                println!(
                    "{} [{}]: slope {:.4} ± {:.4} (95%, n={})",
                    fit.name, fit.at, fit.fit.slope, fit.fit.slope_ci95, fit.n_points
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(if report.is_partial() { EXIT_PARTIAL } else { 0 })
        }
        Command::Diagnose { width_states, eps_p } => {
            let bundle = experiment::run_diagnostics(&cfg, width_states, eps_p)?;
            for f in &bundle.files {
                println!("wrote {}", cfg.output_dir.join(f).display());
            }
            Ok(0)
        }
        Command::Cache { action } => {
            let cache = SpectrumCache::new(cfg.cache_dir())?;
            match action {
                CacheAction::List => {
                    let entries = cache.entries()?;
                    for (path, dim) in &entries {
                        let bytes = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
                        println!("dim {dim:>6}  {bytes:>12} B  {}", path.display());
                    }
                    println!("{} entries", entries.len());
                }
                CacheAction::Clear => println!("removed {} entries", cache.clear()?),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
