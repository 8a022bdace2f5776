use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ckd::quantify::QFunctionKind;
use ckd_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ckd", version, about = "Continual knowledge distillation experiments on synthetic translation domains")]
struct Cli {
    /// Override a config key, e.g. `--set distill.alpha=0.2`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every domain's corpora and the shared vocabulary.
    GenData { config: PathBuf },
    /// Train one model per domain on its training split.
    TrainTeachers {
        config: PathBuf,
        /// Flag a domain's model as malicious when used as a teacher. Repeatable.
        #[arg(long, value_name = "DOMAIN")]
        malicious: Vec<String>,
    },
    /// Run the configured method over the teacher order.
    Run { config: PathBuf },
    /// Merge history files into a table and report.csv.
    Report {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Correlate mean Q with BLEU over every model and test set.
    Correlate {
        config: PathBuf,
        /// token_entropy, hard_label_match or token_ce. Defaults to all three.
        #[arg(long, value_name = "KIND")]
        kind: Vec<String>,
    },
}

fn parse_kind(s: &str) -> Result<QFunctionKind, CliError> {
    QFunctionKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| CliError::Config(format!("unknown quantification kind `{s}`")))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let load = |p: &PathBuf| ExperimentConfig::load(p, &cli.overrides);
    match &cli.command {
        Command::GenData { config } => {
            let files = ckd_cli::gen_data(&load(config)?)?;
            println!("wrote {} files", files.len());
        }
        Command::TrainTeachers { config, malicious } => {
            for t in ckd_cli::train_teachers(&load(config)?, malicious)? {
                let flag = if t.malicious { " malicious" } else { "" };
                println!("domain={} dev_bleu={:.2} checkpoint={}{flag}", t.domain, t.dev_bleu, t.path.display());
            }
        }
        Command::Run { config } => {
            let r = ckd_cli::run(&load(config)?)?;
            let h = &r.history;
            println!(
                "method={} config={} steps={} final_bleu={:.2} delta_bleu={:+.2} ad={:.2} dir={}",
                h.method,
                h.config,
                h.steps.len() - 1,
                h.steps.last().map_or(0.0, |s| s.bleu),
                h.final_delta(),
                h.final_ad(),
                r.dir.display()
            );
        }
        Command::Report { histories, out } => {
            print!("{}", ckd_cli::report(histories, out)?.table);
        }
        Command::Correlate { config, kind } => {
            let kinds = if kind.is_empty() {
                QFunctionKind::ALL.to_vec()
            } else {
                kind.iter().map(|k| parse_kind(k)).collect::<Result<_, _>>()?
            };
            for s in ckd_cli::correlate(&load(config)?, &kinds)? {
                println!("kind={} cells={} r={:.4} r_oriented={:.4}", s.kind.name(), s.cells.len(), s.r, s.r_oriented);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = ckd_cli::init_threads().and_then(|()| execute(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
