use std::path::PathBuf;
use std::process::ExitCode;

use bma_core::Result;
use bma_harness::experiment::with_pool;
use bma_harness::{report, ExperimentConfig, Pipeline, Profile};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bma", version, about = "Benchmark of Bayesian model average approximations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the SGD ensembles.
    Train(Common),
    /// Fit last-layer VI posteriors and build coresets.
    Coreset(Common),
    /// Draw NUTS samples on the coreset posteriors.
    Sample(Common),
    /// Evaluate every cell and write results.csv.
    Evaluate(Common),
    /// Write summary.csv and SVG curves from results.csv.
    Report(Common),
    /// Run the full matrix and report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// JSON file overriding the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "desk")]
    profile: Profile,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(self.profile, path)?,
            None => ExperimentConfig::profile(self.profile),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cmd: Command) -> Result<()> {
    let (common, stage) = match &cmd {
        Command::Train(c) => (c, "train"),
        Command::Coreset(c) => (c, "coreset"),
        Command::Sample(c) => (c, "sample"),
        Command::Evaluate(c) => (c, "evaluate"),
        Command::Report(c) => (c, "report"),
        Command::Run(c) => (c, "run"),
    };
    let cfg = common.resolve()?;
    if stage == "report" {
        for path in report::emit_report(&cfg.out_dir)? {
            println!("{}", path.display());
        }
        return Ok(());
    }
    let workers = cfg.workers;
    with_pool(workers, move || {
        let p = Pipeline::new(cfg)?;
        match stage {
            "train" => p.train_all()?,
            "coreset" => p.coreset_all()?,
            "sample" => p.sample_all()?,
            "evaluate" => {
                p.evaluate_all()?;
            }
            _ => {
                p.evaluate_all()?;
                report::emit_report(&p.dir)?;
            }
        }
        println!("{}", p.dir.display());
        Ok(())
    })
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end()),
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

