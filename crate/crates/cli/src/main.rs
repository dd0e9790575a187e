use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use patchrec_core::experiment::{self, ExperimentConfig, TrainOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Patch-compressed prompts for next-item recommendation with a tiny transformer.
#[derive(Parser)]
#[command(name = "patchrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData(Common),
    /// Filter and split the dataset files, writing one file per split.
    Ingest(Common),
    /// Run the configured training plans in order.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip pre-training plans; fine-tuning starts from scratch.
        #[arg(long)]
        no_pretrain: bool,
        /// Continue interrupted plans and skip finished ones.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate checkpoints over the configured sweeps.
    Eval(Common),
    /// Summarize training logs and evaluation results.
    Report(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.resolve();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    println!("# resolved config\n{}", cfg.to_toml()?);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let stats = experiment::gen_data(&cfg)?;
            println!("# dataset\n{}", stats.render());
        }
        Command::Ingest(c) => {
            let cfg = load(&c)?;
            let stats = experiment::ingest(&cfg)?;
            println!("# dataset\n{}", stats.render());
        }
        Command::Train {
            common,
            no_pretrain,
            resume,
        } => {
            let cfg = load(&common)?;
            let opts = TrainOptions {
                no_pretrain,
                resume,
                stop: None,
            };
            for rec in experiment::train(&cfg, &opts)? {
                let last = rec.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
                println!("{}: {} steps, final loss {last:.4}", rec.plan, rec.steps.len());
            }
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            for r in experiment::eval(&cfg)? {
                println!(
                    "{}: HR@10 {:.4} NDCG@10 {:.4} HR@20 {:.4} NDCG@20 {:.4} CR {:.2}",
                    r.label(),
                    r.hr_10,
                    r.ndcg_10,
                    r.hr_20,
                    r.ndcg_20,
                    r.cr
                );
            }
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            let text = experiment::report(&cfg)?;
            std::fs::write(cfg.out_dir.join("report.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .find_map(|c| c.downcast_ref::<patchrec_core::Error>())
                .is_some_and(patchrec_core::Error::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
