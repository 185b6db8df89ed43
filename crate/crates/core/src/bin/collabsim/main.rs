use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use collabsim::harness::{
    ablate, calibrate_codebook, obtain_codebook, run_episode, sweep, write_ablation, write_episode, write_plot_script,
    write_sweep, ExperimentConfig, SweepAxis,
};
use collabsim::Result;

#[derive(Parser)]
#[command(
    name = "collabsim",
    version,
    about = "Bandwidth-aware collaborative perception simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the shared codebook and write it to `<out>/codebook.bin`.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Single calibration seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one episode and write its CSV files.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep one axis over the configured seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// budget, interval, codebook, latency or pose_error
        #[arg(long)]
        axis: String,
        /// Single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the full pipeline with each single-stage ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate { common, seed } => {
            let (cfg, out) = load(&common)?;
            let seeds = seed.map_or_else(|| cfg.calibration_seeds.clone(), |s| vec![s]);
            let (cb, objective) = calibrate_codebook::<f64>(&cfg, &seeds)?;
            let path = out.join("codebook.bin");
            cb.save(&path)?;
            println!(
                "codebook: {} codes x {} dims, version {:#010x}, objective {:.4} -> {:.4}, {}",
                cb.n_l(),
                cb.dim(),
                cb.version_id,
                objective.first().copied().unwrap_or(0.0),
                objective.last().copied().unwrap_or(0.0),
                path.display()
            );
        }
        Command::Run { common, seed } => {
            let (cfg, out) = load(&common)?;
            let cb = if cfg.ablate.collaboration || cfg.ablate.channel {
                None
            } else {
                Some(obtain_codebook::<f64>(&cfg)?)
            };
            let result = run_episode(&cfg, seed, cb.as_ref())?;
            let files = write_episode(&result, &out)?;
            write_plot_script(&out)?;
            println!(
                "seed {seed}: AP@0.5 {:.4} (single agent {:.4}), AP@0.7 {:.4}, MOTA {:.4}, {} bytes",
                result.scores.ap50, result.single_scores.ap50, result.scores.ap70, result.scores.mota, result.raw_bytes
            );
            for f in files {
                println!("  {}", f.display());
            }
        }
        Command::Sweep { common, axis, seed } => {
            let (cfg, out) = load(&common)?;
            let axis = SweepAxis::parse(&axis)?;
            let outcome = sweep::<f64>(&cfg, axis, &seeds(&cfg, seed))?;
            let path = write_sweep(&outcome, &out)?;
            write_plot_script(&out)?;
            for r in &outcome.records {
                println!(
                    "{:>10}  bytes {:>12.1}  log2 {:>6.2}  AP50 {:.4}  AP70 {:.4}  MOTA {:.4}",
                    r.budget, r.raw_bytes, r.paper_metric, r.ap50, r.ap70, r.mota
                );
            }
            println!("{}", path.display());
        }
        Command::Ablate { common, seed } => {
            let (cfg, out) = load(&common)?;
            let records = ablate::<f64>(&cfg, &seeds(&cfg, seed))?;
            let path = write_ablation(&records, &out)?;
            write_plot_script(&out)?;
            for r in &records {
                println!(
                    "{:>18}  bytes {:>12.1}  AP50 {:.4}  AP70 {:.4}",
                    r.budget, r.raw_bytes, r.ap50, r.ap70
                );
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Parses `args` and executes the command; `Err` carries the diagnostic line.
fn invoke<I, A>(args: I) -> std::result::Result<(), String>
where
    I: IntoIterator<Item = A>,
    A: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(e.to_string().trim_end().to_string()),
    };
    execute(cli).map_err(|e| format!("collabsim: error: {e}"))
}

fn main() -> ExitCode {
    match invoke(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(diagnostic) => {
            eprintln!("{diagnostic}");
            ExitCode::FAILURE
        }
    }
}
