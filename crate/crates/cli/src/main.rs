//! `fedlora`: command-line front end for federated adapter experiments.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedlora_core::comm::{format_hundredths, gib_2dp, gib_whole};
use fedlora_core::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Federated low-rank adapter experiments")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs). Results do not
    /// depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `[output] dir`; default `out`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated master seeds (overrides `seed`).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured strategy and baselines; write results.csv,
    /// transcript.json, comm.csv and comm_report.json.
    Run(Common),
    /// Shard the pooled sites into k clients for each k and write scale.csv.
    ScaleStudy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated shard counts (overrides `[scale] k_list`).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Run with per-site task sets plus a fully annotated reference run.
    Uneven(Common),
    /// Rank-sum test of per-seed F1 between two results.csv files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Output directory for compare.csv (default `.`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Full-scale communication figures for the configured preset.
    CommReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn seeds(common: &Common) -> Option<&[u64]> {
    (!common.seeds.is_empty()).then_some(common.seeds.as_slice())
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common.out_dir.as_deref(), &config);
    Ok((config, dir))
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run(common) => {
            let (config, dir) = load(&common)?;
            let out = experiment::cmd_run(&config, &dir, seeds(&common))?;
            println!("wrote {} result rows to {}", out.rows.len(), dir.display());
        }
        Command::Uneven(common) => {
            let (config, dir) = load(&common)?;
            let out = experiment::cmd_uneven(&config, &dir, seeds(&common))?;
            println!("wrote {} result rows to {}", out.rows.len(), dir.display());
        }
        Command::ScaleStudy { common, k } => {
            let (config, dir) = load(&common)?;
            let k = (!k.is_empty()).then_some(k.as_slice());
            let rows = experiment::cmd_scale_study(&config, &dir, seeds(&common), k)?;
            println!("wrote {} scale rows to {}", rows.len(), dir.join("scale.csv").display());
        }
        Command::Compare { a, b, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| PathBuf::from("."));
            let rows = experiment::cmd_compare(&a, &b, &dir)?;
            let mut text = String::from("strategy,testset,task,scheme,mean_a,mean_b,p\n");
            for r in rows {
                text += &format!(
                    "{},{},{},{},{:.4},{:.4},{:.4}\n",
                    r.strategy, r.testset, r.task, r.scheme, r.mean_a, r.mean_b, r.p
                );
            }
            emit(&text);
        }
        Command::CommReport { config, out_dir: flag } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = out_dir(flag.as_deref(), &config);
            let report = experiment::cmd_comm_report(&config, &dir)?;
            let lines = [
                ("preset", report.preset.clone()),
                ("rounds x sites", format!("{} x {}", report.rounds, report.clients)),
                ("lora params", report.lora_params.to_string()),
                ("full params", report.full_params.to_string()),
                ("reduction", format!("{}%", format_hundredths(report.reduction_hundredths))),
                ("lora run total", format!("{} GB", gib_2dp(report.lora_total_bytes))),
                (
                    "full model per site per round",
                    format!("{} GB", gib_2dp(report.full.per_site_per_round_bytes)),
                ),
                ("full model run total", format!("{} GB", gib_whole(report.full.total_bytes))),
            ];
            let mut text: String = lines.iter().map(|(k, v)| format!("{k:<31}{v}\n")).collect();
            text += "(GB = 2^30 bytes; upload and download both counted)\n";
            emit(&text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
