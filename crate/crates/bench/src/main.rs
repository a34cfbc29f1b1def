use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use closet_bench::experiments::{combiner_task, outfit_task, render};
use closet_bench::measure::{measure_size, write_csv, Workload};
use closet_core::IndexKind;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "closet-bench", version, about = "Index benchmarks and synthetic training demos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean and p99 query time of every index kind across store sizes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "10000,30000,100000,300000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query time, recall@k against FLAT and memory of every index kind.
    Table {
        #[arg(long, default_value_t = 100_000)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the outfit transformer and the combiner on synthetic tasks and
    /// checks the results. Exits non-zero if a check fails.
    TrainDemo {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        combiner_seed: u64,
    },
    /// Writes a synthetic catalog, trained models and a service config.
    DemoData {
        #[arg(long, default_value = "demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
}

fn sink(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Sweep {
            sizes,
            dim,
            k,
            queries,
            seed,
            out,
        } => {
            let work = Workload::new(dim, k, queries, seed);
            let mut rows = Vec::new();
            for size in sizes {
                rows.extend(measure_size(size, &work, &IndexKind::ALL, seed, |_, _| Ok(()))?.sweep_rows());
            }
            write_csv(sink(&out)?, &rows)?;
        }
        Command::Table {
            size,
            dim,
            k,
            queries,
            seed,
            out,
        } => {
            let work = Workload::new(dim, k, queries, seed);
            let report = measure_size(size, &work, &IndexKind::ALL, seed, |_, _| Ok(()))?;
            write_csv(sink(&out)?, &report.table_rows())?;
        }
        Command::TrainDemo { seed, combiner_seed } => {
            let outfit = outfit_task(seed)?;
            let comb = combiner_task(combiner_seed)?;
            print!("{}", render(&outfit, &comb));
            if !(outfit.passed() && comb.passed()) {
                bail!("train-demo checks failed");
            }
        }
        Command::DemoData { out, seed, listen } => {
            let cfg = closet_bench::demo::write_demo(&out, seed, &listen)?;
            println!("{}", cfg.display());
        }
    }
    Ok(())
}
