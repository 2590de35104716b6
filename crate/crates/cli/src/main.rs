use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mace_core::config::RunConfig;
use mace_core::harness::{self, Axis, Component, RunReport};
use mace_core::ippo::CurveRecord;
use mace_core::wmi;

#[derive(Parser)]
#[command(name = "mace", version, about = "Multi-agent coordinated exploration experiments")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "MACE_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write curves and summaries.
    Train {
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one config per value of an ablation axis.
    Ablate {
        config: PathBuf,
        /// mode, lambda, w or sum_vs_max
        #[arg(long)]
        axis: String,
        /// Comma-separated values replacing the axis defaults.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// MI and WMI of the two illustrative states as CSV.
    WmiDemo {
        /// Step of the p(a1) grid over (0, 1).
        #[arg(long, default_value_t = 0.05)]
        grid: f64,
    },
    /// Per-cell mean of one intrinsic reward component over an iteration range.
    Heatmap {
        /// A seed directory containing cells.csv.
        run_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        agent: usize,
        /// nov or hin
        #[arg(long, default_value = "hin")]
        component: String,
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// Inclusive; defaults to every logged iteration.
        #[arg(long, default_value_t = usize::MAX)]
        to: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn resolve(root: Option<&Path>, dir: PathBuf) -> PathBuf {
    match root {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir,
    }
}

fn load(path: &Path, output: Option<PathBuf>, root: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = output {
        cfg.output_dir = out;
    }
    cfg.output_dir = resolve(root, cfg.output_dir);
    Ok(cfg)
}

fn print_seed(seed: u64, curve: &[CurveRecord]) {
    if let Some(last) = curve.last() {
        eprintln!(
            "seed {seed}: {} iterations, final reward {:.2}, success {:.2}",
            curve.len(),
            last.mean_episode_reward,
            last.success_rate
        );
    }
}

fn report_failures(report: &RunReport) -> bool {
    for (seed, msg) in &report.failures {
        eprintln!("seed {seed} failed: {msg}");
    }
    report.failures.is_empty()
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Train { config, output } => {
            let cfg = load(&config, output, root)?;
            let report = harness::run_with(&cfg, |run, curve| print_seed(run.seed, curve))?;
            println!("{}", report.dir.display());
            Ok(report_failures(&report))
        }
        Command::Ablate {
            config,
            axis,
            values,
            output,
        } => {
            let cfg = load(&config, output, root)?;
            let axis = match values {
                Some(v) => Axis::with_values(&axis, &v)?,
                None => Axis::default_for(&axis)?,
            };
            let report = harness::ablate(&cfg, &axis)?;
            println!("variant,final_median_reward");
            for (name, median) in report.final_medians() {
                println!("{name},{median}");
            }
            Ok(report.variants.iter().all(|(_, r)| report_failures(r)))
        }
        Command::WmiDemo { grid } => {
            if !(grid > 0.0 && grid < 0.5) {
                bail!("--grid must be in (0, 0.5), got {grid}");
            }
            let rows = wmi::illustrative_sweep(&wmi::interior_grid(grid))?;
            print!("{}", wmi::sweep_csv(&rows));
            Ok(true)
        }
        Command::Heatmap {
            run_dir,
            agent,
            component,
            from,
            to,
            csv,
        } => {
            let component: Component = component.parse()?;
            let map = harness::heatmap_export(&run_dir, agent, component, from, to)?;
            match csv {
                Some(path) => {
                    std::fs::write(&path, map.to_csv()).with_context(|| format!("writing {}", path.display()))?;
                    print!("{}", map.to_text());
                }
                None => {
                    print!("{}", map.to_csv());
                    eprint!("{}", map.to_text());
                }
            }
            Ok(true)
        }
    }
}
