use std::path::PathBuf;
use std::process::ExitCode;

use chromaskew::config::ExperimentConfig;
use chromaskew::experiments::{self, Report};
use chromaskew::Error;
use clap::{Parser, Subcommand};

/// Environment variable overriding the output directory.
const OUT_ENV: &str = "CHROMASKEW_OUT";

#[derive(Parser, Debug)]
#[command(name = "chromaskew", version, about = "Colour-perturbation attacks on saliency maps in simulated federated learning")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (also settable through CHROMASKEW_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Caps the train and test set sizes.
    #[arg(long, global = true)]
    limit: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attack a clean model outside federation.
    Baseline,
    /// Federated attack against a vanilla twin.
    Fl,
    /// Single-operator grids against the combined grid.
    Ablation,
    /// Attack against random colour skew.
    Compare,
    /// Attack samples evaluated on a second architecture.
    Transfer,
    /// Federated attack under every aggregator.
    Robust,
    /// Dump the configured dataset as PPM images and a label CSV.
    GenData,
    /// Print the clean and perturbed heatmaps of one test sample.
    Inspect {
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownLayer(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Empty(_) => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> chromaskew::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
        cfg.out_dir = out;
    }
    if let Some(n) = cli.limit {
        cfg.dataset.train_size = cfg.dataset.train_size.min(n);
        cfg.dataset.test_size = cfg.dataset.test_size.min(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> chromaskew::Result<Report> {
    let cfg = load_config(cli)?;
    log::info!("writing to {}", cfg.out_dir.display());
    let report = match &cli.command {
        Command::Baseline => experiments::cmd_baseline(&cfg)?,
        Command::Fl => experiments::cmd_fl(&cfg)?,
        Command::Ablation => experiments::cmd_ablation(&cfg)?,
        Command::Compare => experiments::cmd_compare(&cfg)?,
        Command::Transfer => experiments::cmd_transfer(&cfg)?,
        Command::Robust => experiments::cmd_robust(&cfg)?,
        Command::GenData => experiments::cmd_gen_data(&cfg, &cfg.out_dir)?,
        Command::Inspect { sample } => experiments::cmd_inspect(&cfg, *sample)?,
    };
    report.write(&cfg.out_dir)?;
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            if !report.text.is_empty() {
                print!("{}", report.text);
            }
            for (name, value) in &report.summary {
                println!("{name}: {value}");
            }
            for (name, table) in &report.tables {
                if table.len() <= 8 {
                    println!("\n{name}\n{}", table.to_csv().trim_end());
                } else {
                    println!("{name}: {} rows", table.len());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
