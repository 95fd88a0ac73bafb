use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use divdr::harness::{
    cmd_eval, cmd_export_aspace, cmd_gen_data, cmd_sweep, cmd_train, exit_code, output_root, sweep_csv,
    ExperimentConfig, Split,
};
use divdr::{Error, Result};

#[derive(Parser)]
#[command(name = "divdr", version, about = "Train and inspect diversified dynamic routing networks")]
struct Cli {
    /// Worker threads for per-sample work; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run into <out>/<name>.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a run's checkpoint on one split.
    Eval {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val_x")]
        split: String,
    },
    /// Train once per value of one parameter and summarize.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// One of K, alpha, lambda1, lambda2.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export gate activations, cluster assignments and a PCA projection.
    ExportAspace {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val_x")]
        split: String,
    },
    /// Write the synthetic splits to disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Target directory; defaults to <root>/<name>-data.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_values(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config("values", format!("`{v}` is not a number")))
        })
        .collect()
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Train { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let summary = cmd_train(&cfg, out.as_deref(), threads)?;
            eprintln!("run directory: {}", summary.run_dir.display());
            print_json(&summary.final_eval)
        }
        Command::Eval { out, split } => print_json(&cmd_eval(&out, Split::parse(&split)?, threads)?),
        Command::Sweep {
            config,
            out,
            param,
            values,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let values = parse_values(&values)?;
            let (dir, rows) = cmd_sweep(&cfg, &param, &values, out.as_deref(), threads)?;
            eprintln!("sweep directory: {}", dir.display());
            print!("{}", sweep_csv(&param, &rows));
            Ok(())
        }
        Command::ExportAspace { out, split } => {
            let export = cmd_export_aspace(&out, Split::parse(&split)?, threads)?;
            for p in [&export.aspace, &export.edges, &export.pca] {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::GenData { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let dir = out.unwrap_or_else(|| output_root(None, &cfg).join(format!("{}-data", cfg.name)));
            for p in cmd_gen_data(&cfg, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
