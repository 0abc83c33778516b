use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use projnce::encoder::parse_arch;
use projnce::experiments::{self, ExperimentConfig, ExperimentName};
use projnce::projections::{KernelConfig, Metric};

/// Synthetic-GMM studies of projection-based contrastive losses.
#[derive(Parser, Debug)]
#[command(name = "projnce-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// MI of learned embeddings on the binary mixture, per loss.
    MiBinary(Common),
    /// MI of learned embeddings on the 32-class mixture, per loss.
    MiMulticlass(Common),
    /// SoftNCE over a bandwidth × metric grid.
    BandwidthSweep(Common),
    /// Empirical bounds against the Monte-Carlo oracle.
    BoundCheck(Common),
    /// Optimal-critic SoftNCE gap against batch size.
    SoftnceConsistency(Common),
    /// NW class-mean estimate error against batch size.
    NwConsistency(Common),
    /// Clean-label probe accuracy after training on noisy labels.
    NoisyLabelProbe(Common),
    /// Analytic against finite-difference gradients for every loss.
    Gradcheck(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config with sections experiment, gmm, train, kernel, projection.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Concurrent jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (PROJNCE_OUT takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
    /// Encoder layer sizes, e.g. 5,16,16,2.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Kernel bandwidth.
    #[arg(long)]
    h: Option<f64>,
    /// Kernel metric: l1, l2 or cos.
    #[arg(long)]
    metric: Option<String>,
}

impl Command {
    fn split(self) -> (ExperimentName, Common) {
        match self {
            Command::MiBinary(c) => (ExperimentName::MiBinary, c),
            Command::MiMulticlass(c) => (ExperimentName::MiMulticlass, c),
            Command::BandwidthSweep(c) => (ExperimentName::BandwidthSweep, c),
            Command::BoundCheck(c) => (ExperimentName::BoundCheck, c),
            Command::SoftnceConsistency(c) => (ExperimentName::SoftnceConsistency, c),
            Command::NwConsistency(c) => (ExperimentName::NwConsistency, c),
            Command::NoisyLabelProbe(c) => (ExperimentName::NoisyLabelProbe, c),
            Command::Gradcheck(c) => (ExperimentName::Gradcheck, c),
        }
    }
}

fn resolve(name: ExperimentName, c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(Some(name), &text)?
        }
        None => ExperimentConfig::defaults(name),
    };
    if let Some(seeds) = &c.seed_list {
        cfg.experiment.seeds = seeds.clone();
    }
    if let Some(arch) = &c.arch {
        cfg.train.arch = parse_arch(arch)?;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if c.h.is_some() || c.metric.is_some() {
        let metric = match &c.metric {
            Some(m) => Metric::parse(m)?,
            None => cfg.kernel.metric,
        };
        cfg.kernel = KernelConfig::new(c.h.unwrap_or(cfg.kernel.h), metric)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (name, common) = cli.command.split();
    let cfg = resolve(name, &common)?;
    if common.dry_run {
        print!("{}", cfg.to_json()?);
        return Ok(ExitCode::SUCCESS);
    }
    let out = std::env::var_os("PROJNCE_OUT")
        .map(PathBuf::from)
        .or(common.out)
        .unwrap_or_else(|| PathBuf::from("out").join(name.name()));
    let outcome = experiments::run(&cfg, &out, common.jobs.max(1))?;
    for line in &outcome.summary {
        println!("{line}");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(match outcome.pass {
        Some(true) => {
            println!("PASS");
            ExitCode::SUCCESS
        }
        Some(false) => {
            println!("FAIL");
            ExitCode::FAILURE
        }
        None => ExitCode::SUCCESS,
    })
}
