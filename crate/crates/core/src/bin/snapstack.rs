use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use snapstack::exec::Exec;
use snapstack::harness::{
    cmd_compare, cmd_report, cmd_sweep_offset, cmd_sweep_temperature, cmd_train, load_checked_store,
    write_csv, Experiment, ExperimentConfig, HarnessError, Policy,
};
use snapstack::stacking::LossSource;

#[derive(Parser)]
#[command(name = "snapstack", version, about = "Stacked snapshot ensembles for small MLPs")]
struct Cli {
    /// Evaluate on one thread even when built with the parallel feature.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config; the built-in blobs setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Train,
    Val,
}

impl From<Source> for LossSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Train => LossSource::Train,
            Source::Val => LossSource::Validation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write the snapshot store.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy over temperatures and ensemble sizes.
    SweepTemp {
        #[command(flatten)]
        common: Common,
        /// Store to read; `<out-dir>/store.snap` by default.
        #[arg(long)]
        store: Option<PathBuf>,
        /// min, mid, min+mid, window:S or offset:K
        #[arg(long, default_value = "min")]
        policy: String,
        #[arg(long, value_enum, default_value = "train")]
        source: Source,
        /// Comma-separated temperatures; the config grid by default.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Comma-separated ensemble sizes; 1 up to the config maximum by default.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Accuracy versus offset from the learning-rate minima.
    SweepOffset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Comma-separated offsets; the captured offsets by default.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        offsets: Option<Vec<i64>>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, value_enum, default_value = "train")]
        source: Source,
    },
    /// Full comparison table against single model, ensembles and SWA.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Markdown summary of sweep and comparison CSVs.
    Report {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(common: &Common) -> Result<Experiment, HarnessError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::blobs_default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Experiment::prepare(config)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io(format!("writing {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("creating {}: {e}", dir.display())))
}

fn check_taus(taus: &[f64]) -> Result<(), HarnessError> {
    match taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        Some(t) => Err(HarnessError::Validation(format!("temperatures must be positive, got {t}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Train { common } => {
            let exp = experiment(&common)?;
            let out = cmd_train(&exp, &common.out_dir)?;
            for line in out.summary() {
                println!("{line}");
            }
            println!(
                "wrote {} ({} snapshots, {:.2?})",
                out.store_path.display(),
                out.run.store.len(),
                out.elapsed
            );
        }
        Command::SweepTemp {
            common,
            store,
            policy,
            source,
            taus,
            sizes,
        } => {
            let exp = experiment(&common)?;
            let policy: Policy = policy.parse()?;
            let source = LossSource::from(source);
            let taus = taus.unwrap_or_else(|| exp.config.tau_grid.clone());
            check_taus(&taus)?;
            let sizes = sizes.unwrap_or_else(|| exp.config.ensemble_sizes());
            let store_path = store.unwrap_or_else(|| common.out_dir.join("store.snap"));
            let store = load_checked_store(&exp, &store_path)?;
            let rows = cmd_sweep_temperature(&exp, &store, policy, source, &taus, &sizes, exec)?;
            create_dir(&common.out_dir)?;
            let path = common
                .out_dir
                .join(format!("sweep_temp_{}_{}.csv", policy.slug(), source.name()));
            write_csv(&rows, &path)?;
            info!("wrote {} rows", rows.len());
            println!("wrote {}", path.display());
        }
        Command::SweepOffset {
            common,
            store,
            offsets,
            tau,
            source,
        } => {
            let exp = experiment(&common)?;
            check_taus(&[tau])?;
            let source = LossSource::from(source);
            let offsets = offsets.unwrap_or_else(|| {
                let mut o = vec![0];
                o.extend(exp.config.capture.offsets.iter().filter(|&&k| k != 0));
                o
            });
            let store_path = store.unwrap_or_else(|| common.out_dir.join("store.snap"));
            let store = load_checked_store(&exp, &store_path)?;
            let rows = cmd_sweep_offset(&exp, &store, &offsets, tau, source, exec)?;
            create_dir(&common.out_dir)?;
            let path = common.out_dir.join(format!("sweep_offset_{}.csv", source.name()));
            write_csv(&rows, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Compare { common } => {
            let exp = experiment(&common)?;
            let out = cmd_compare(&exp, exec)?;
            create_dir(&common.out_dir)?;
            let csv_path = common.out_dir.join("compare.csv");
            write_csv(&out.rows, &csv_path)?;
            let md = out.markdown();
            write_text(&common.out_dir.join("compare.md"), &md)?;
            print!("{md}");
            println!(
                "main run {:.2?}, {} SGD steps across all runs",
                out.main_run_elapsed, out.total_sgd_steps
            );
        }
        Command::Report { csvs, out } => {
            let md = cmd_report(&csvs)?;
            match out {
                Some(path) => write_text(&path, &md)?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
