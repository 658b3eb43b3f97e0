use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use precond_bench::config::TrainConfig;
use precond_bench::fetch::{mnist_fetch, Source, DEFAULT_MIRROR};
use precond_bench::load_dataset;
use precond_bench::report::{emit_csv, table};
use precond_bench::throughput::{bench_throughput, GridConfig};
use precond_bench::train::train;
use precond_bench::verify::{run_checks, Mutation};

#[derive(Parser)]
#[command(name = "precond", version, about = "Gradient preconditioning benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP and report the best-validation test accuracy.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Metrics CSV; overrides the config's `output`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Measure throughput and state memory over a grid.
    Bench {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the oracle checks; exits nonzero if any fails.
    Verify {
        /// Deliberately break one computation (kfac-vec-order, signed-eigenvalues).
        #[arg(long)]
        mutation: Option<Mutation>,
    },
    /// Download or copy the MNIST IDX files into a directory.
    MnistFetch {
        #[arg(long)]
        dir: PathBuf,
        /// URL prefix, or a local directory with raw or .gz files.
        #[arg(long, default_value = DEFAULT_MIRROR)]
        source: String,
    },
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train { config, output } => {
            let cfg = TrainConfig::load(&config)?;
            let data = load_dataset(&cfg.dataset, cfg.seed)?;
            let report = train(&cfg, &data)?;
            if let Some(path) = output.or(cfg.output.clone()) {
                emit_csv(&report.rows, &path)?;
            }
            for r in &report.rows {
                eprintln!(
                    "epoch {:>3}  step {:>6}  loss {:.4}  val {:.4}  test {:.4}  {:.0} ex/s {}",
                    r.epoch, r.step, r.train_loss, r.validation_accuracy, r.test_accuracy, r.examples_per_sec, r.note
                );
            }
            let row = vec![
                cfg.maker.to_string(),
                cfg.batch_size.to_string(),
                cfg.precond.curvature_interval.to_string(),
                format!("{:.2}", 100.0 * report.test_accuracy),
            ];
            println!("{}", table(&["maker", "|B|", "T", "test acc (%)"], &[row]));
            Ok(!report.diverged)
        }
        Command::Bench { grid, output } => {
            let grid = GridConfig::load(&grid)?;
            let rows = bench_throughput(&grid, |r| {
                eprintln!(
                    "{} |B|={} T={}: {:.0} ex/s",
                    r.maker, r.batch_size, r.interval, r.examples_per_sec
                )
            })?;
            if let Some(path) = output.or(grid.output.clone()) {
                emit_csv(&rows, &path)?;
            }
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.maker.clone(),
                        r.batch_size.to_string(),
                        r.interval.to_string(),
                        format!("{:.3}", r.throughput_ratio),
                        format!("{:.3}", r.state_bytes_ratio),
                    ]
                })
                .collect();
            println!("{}", table(&["maker", "|B|", "T", "throughput", "memory"], &cells));
            Ok(true)
        }
        Command::Verify { mutation } => {
            if let Some(m) = mutation {
                println!("mutation {m} applied; expected to break {}", m.target());
            }
            let checks = run_checks(mutation);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            Ok(failed == 0)
        }
        Command::MnistFetch { dir, source } => {
            let written = mnist_fetch(&dir, &Source::parse(&source))?;
            println!("{} file(s) written to {}", written.len(), dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    precond_bench::retain_freed_memory();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
