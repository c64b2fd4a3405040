use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use hmws::harness::{self, Domain, RunConfig};
use hmws::Error;

#[derive(Parser)]
#[command(
    name = "hmws",
    version,
    about = "Hybrid memoised wake-sleep: data, training, evaluation, plots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Timeseries,
    Blocks2d,
    Testbed,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Domain {
        match d {
            DomainArg::Timeseries => Domain::Timeseries,
            DomainArg::Blocks2d => Domain::Blocks2d,
            DomainArg::Testbed => Domain::Testbed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        domain: DomainArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `blocks` / `testbed` sections shape the data.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Preprocess a labelled time-series CSV into a dataset directory.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// IWAE evaluation of a checkpoint; prints a JSON summary.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; defaults to the training data of the run.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        s_test: usize,
        /// Also write the summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write learning curves, extrapolations, memories and reconstructions.
    ExportPlots {
        #[arg(long)]
        run: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_)) => 3,
        Some(_) => 4,
        None => 3,
    }
}

fn gen_data(
    domain: Domain,
    seed: u64,
    count: usize,
    out: &Path,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(domain, harness::Method::Hmws, 0, out),
    };
    let n = harness::gen_data(domain, seed, count, out, &cfg.blocks, &cfg.testbed)?;
    println!("wrote {n} items to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            domain,
            seed,
            count,
            out,
            config,
        } => gen_data(domain.into(), seed, count, &out, config.as_deref()),
        Command::Ingest { csv, seed, out } => {
            let (ds, report) = hmws::gp::ingest_timeseries(&csv, seed)?;
            for (line, reason) in &report.rejected {
                log::warn!("{}:{line}: row rejected: {reason}", csv.display());
            }
            for line in &report.resampled {
                log::warn!("{}:{line}: short row resampled", csv.display());
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            ds.write_csv(&out.join(harness::TIMESERIES_FILE))?;
            println!(
                "kept {} series ({} rejected, {} resampled)",
                ds.len(),
                report.rejected.len(),
                report.resampled.len()
            );
            Ok(())
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let s = harness::train(&cfg, resume.as_deref())?;
            println!(
                "{} iterations, median log p {:.4} (q25 {:.4}, q75 {:.4}), {} likelihood evaluations",
                s.iterations, s.last.logp_median, s.last.logp_q25, s.last.logp_q75, s.last.lik_evals
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            s_test,
            out,
        } => {
            let summary = harness::eval_checkpoint(&ckpt, data.as_deref(), s_test)?;
            let json = serde_json::to_string_pretty(&summary)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n"))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{json}");
            Ok(())
        }
        Command::ExportPlots { run } => {
            let report = harness::export_plots(&run)?;
            for f in report.files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
