use clap::{Parser, Subcommand};
use segreplay::config::RunConfig;
use segreplay::experiment::{
    compare_csv, compare_rows, compare_table, dump_fusions, generate_to_disk, run_experiment,
};
use segreplay::metrics::MetricReport;
use segreplay::trainer::ReplayStrategy;
use segreplay::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "segreplay",
    about = "Class-incremental segmentation experiments with instance replay"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a config file and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to results/<config>-<strategy>-s<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's replay strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Tabulate finished run directories side by side.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the CSV version of the table.
        #[arg(long, default_value = "compare.csv")]
        csv: PathBuf,
    },
    /// Materialize a synthetic config's dataset to disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the final step's fusion pipeline of a finished run and dump
    /// fused images plus label masks as PNGs.
    DumpFusions {
        run: PathBuf,
        #[arg(short = 'n', long, default_value_t = 8)]
        count: usize,
        /// Defaults to <run>/fusions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn describe(report: &MetricReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    format!(
        "base {} inc {} all {} bg_misclass {:.4}",
        opt(report.base),
        opt(report.inc),
        opt(report.all),
        report.bg_misclass
    )
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            config,
            out,
            seed,
            strategy,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = strategy {
                cfg.strategy = s.parse::<ReplayStrategy>()?;
            }
            let out_dir = out.unwrap_or_else(|| default_out_dir(&config, &cfg));
            let summary = run_experiment(&cfg, &out_dir)?;
            for report in &summary.reports {
                println!("step {}: {}", report.step, describe(report));
            }
            if cfg.strategy == ReplayStrategy::Eir {
                println!(
                    "fusion: {} pasted, {} skipped",
                    summary.pastes, summary.skips
                );
            }
            println!("run directory: {}", out_dir.display());
            Ok(())
        }
        Cmd::Compare { runs, csv } => {
            let rows = compare_rows(&runs)?;
            print!("{}", compare_table(&rows));
            fs::write(&csv, compare_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
            println!("csv written to {}", csv.display());
            Ok(())
        }
        Cmd::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let (train_dir, eval_dir) = generate_to_disk(&cfg, &out)?;
            println!("train split: {}", train_dir.display());
            println!("eval split: {}", eval_dir.display());
            Ok(())
        }
        Cmd::DumpFusions { run, count, out } => {
            let out_dir = out.unwrap_or_else(|| run.join("fusions"));
            let written = dump_fusions(&run, count, &out_dir)?;
            println!("{written} fused pairs written to {}", out_dir.display());
            Ok(())
        }
    }
}

fn default_out_dir(config_path: &Path, cfg: &RunConfig) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    PathBuf::from("results").join(format!("{stem}-{}-s{}", cfg.strategy, cfg.seed))
}
