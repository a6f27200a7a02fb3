use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use popgraph::commands::{self, ExportWhat};
use popgraph::config::ExperimentConfig;
use popgraph::runner;
use popgraph::{Error, Result};

#[derive(Parser)]
#[command(name = "popgraph", version, about = "Adaptive population-graph experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment manifest (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated run seeds; overrides `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Parallel runs; overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::read(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
        cfg.validate()?;
        Ok((cfg, out))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Attention,
    GraphStatic,
    GraphLearned,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV plus column metadata.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides `dataset.seed`.
        #[arg(long)]
        dataset_seed: Option<u64>,
    },
    /// Train the adaptive model once per seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the phenotype-subset x graph x baseline grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-create artifacts from a trained run directory.
    Export {
        /// A `seed-*` directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, dataset_seed } => {
            let (mut cfg, out) = common.resolve()?;
            if let Some(s) = dataset_seed {
                cfg.dataset.seed = s;
            }
            let g = commands::generate(&cfg, &out)?;
            println!(
                "wrote {} ({} rows, {} relevant columns) and {}",
                g.csv.display(),
                g.meta.n,
                g.meta.relevant_count(),
                g.metadata.display()
            );
            Ok(true)
        }
        Command::Train { common } => {
            let (cfg, out) = common.resolve()?;
            let agg = runner::train(&cfg, &out)?;
            for r in &agg.runs {
                println!(
                    "seed {}: mae {} r {} accuracy {} homophily {} attention precision {}",
                    r.seed,
                    fmt(r.mae),
                    fmt(r.r),
                    fmt(r.accuracy),
                    fmt(r.homophily),
                    fmt(r.attention_precision)
                );
            }
            if let Some(m) = agg.summary.mae {
                println!(
                    "mae {:.4} ± {:.4} (median {:.4}, {} runs)",
                    m.mean, m.std, m.median, m.n
                );
            }
            if let Some(a) = agg.summary.accuracy {
                println!(
                    "accuracy {:.4} ± {:.4} (median {:.4}, {} runs)",
                    a.mean, a.std, a.median, a.n
                );
            }
            for f in &agg.failures {
                eprintln!("seed {} failed: {}", f.seed, f.error);
            }
            println!("results in {}", out.display());
            Ok(agg.failures.is_empty())
        }
        Command::Ablate { common } => {
            let (cfg, out) = common.resolve()?;
            let report = runner::ablate(&cfg, &out)?;
            print!("{}", report.table_csv());
            for f in &report.failures {
                eprintln!("{} / {} seed {} failed: {}", f.subset, f.method, f.seed, f.error);
            }
            Ok(report.failures.is_empty())
        }
        Command::Export { run, what, out } => {
            let what = match what {
                What::Attention => ExportWhat::Attention,
                What::GraphStatic => ExportWhat::GraphStatic,
                What::GraphLearned => ExportWhat::GraphLearned,
            };
            let out = out.unwrap_or_else(|| run.clone());
            let done = commands::export(&run, what, &out)?;
            for f in &done.files {
                println!("wrote {}", f.display());
            }
            if let Some(rows) = done.rows {
                println!("{rows} phenotypes ranked");
            }
            if let Some(h) = done.homophily {
                println!("homophily (mean |age difference| over edges): {h:.4}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
