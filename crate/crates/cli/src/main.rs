use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csisense::config::Config;
use csisense::error::ErrorKind;
use csisense::pipeline::{self, RunConfig};
use csisense::Error;

#[derive(Parser, Debug)]
#[command(
    name = "csisense",
    version,
    about = "Wi-Fi CSI activity sensing pipeline"
)]
struct Cli {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `[run] out`. Must already exist.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides any configuration key, e.g. `--set train.episodes=50`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate synthetic captures for every environment and activity.
    Synth,
    /// Align captures and compute per-receiver correlation features.
    Prepare,
    /// Train one model per receiver on the source environment.
    Train,
    /// Evaluate on the target environments and write reports.
    Eval,
    /// Run the receiver, antenna and bandwidth grid and summarize it.
    Report,
}

fn split_override(s: &str) -> Option<(&str, &str, &str)> {
    let (path, value) = s.split_once('=')?;
    let (section, key) = path.trim().rsplit_once('.')?;
    if section.is_empty() || key.is_empty() {
        return None;
    }
    Some((section, key, value.trim()))
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        let (section, key, value) = split_override(o).ok_or_else(|| {
            Error::Config(csisense::config::ConfigError::Invalid {
                section: "cli".into(),
                key: "set".into(),
                value: o.clone(),
                reason: "expected SECTION.KEY=VALUE".into(),
            })
        })?;
        config.set(section, key, value);
    }
    if let Some(seed) = cli.seed {
        config.set("run", "seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        config.set("run", "out", out.to_string_lossy());
    }
    RunConfig::from_config(&config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Synth => {
            let entries = pipeline::cmd_synth(&cfg)?;
            println!("wrote {} captures to {}", entries.len(), cfg.out.display());
        }
        Command::Prepare => {
            for env in pipeline::cmd_prepare(&cfg)? {
                let counts: Vec<String> = env
                    .receivers
                    .iter()
                    .map(|(r, n)| format!("rx{r}={n}"))
                    .collect();
                println!(
                    "{}: {} ({} degenerate windows dropped)",
                    env.environment,
                    counts.join(" "),
                    env.dropped_degenerate
                );
            }
        }
        Command::Train => {
            for rx in pipeline::cmd_train(&cfg)? {
                match rx.final_loss {
                    Some(l) => println!(
                        "rx{}: {} windows, final loss {l:.4}",
                        rx.receiver_id, rx.samples
                    ),
                    None => println!("rx{}: {} windows", rx.receiver_id, rx.samples),
                }
            }
        }
        Command::Eval => {
            for o in pipeline::cmd_eval(&cfg)? {
                let base = o.baseline.as_ref().map_or(String::new(), |b| {
                    format!(", baseline {:.2}%", 100.0 * b.accuracy)
                });
                println!(
                    "{}: {} receivers, accuracy {:.2}%{base}",
                    o.target,
                    o.receivers.len(),
                    100.0 * o.protonet.accuracy
                );
            }
        }
        Command::Report => {
            let rows = pipeline::cmd_report(&cfg)?;
            print!("{}", pipeline::ablation_csv(&rows, &cfg.activity_names()));
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
