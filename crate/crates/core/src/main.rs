use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tgeo_kd::cli::{cmd_analyze, cmd_distill, cmd_selfcheck, cmd_train_teacher, RunConfig};
use tgeo_kd::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tgeo-kd",
    about = "Knowledge distillation with a learned sample-wise fusion ratio",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file in the sectioned key = value format
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set common.seed=7 (repeatable, wins over the file)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects SECTION.KEY=VALUE, got {s:?}"))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher network on cross-entropy and save its parameters
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Distill a student from a saved teacher under the configured policy
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher params file (defaults to <out_dir>/teacher.tgkd)
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Build the discrepancy-group tables and ratio histograms from the dumps
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the gradient, hypergradient, and metric oracle suites
    Selfcheck,
}

fn print_config(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.to_text());
    println!();
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainTeacher { config } => {
            let cfg = config.resolve()?;
            print_config(&cfg);
            let art = cmd_train_teacher(&cfg)?;
            println!("teacher saved to {}", art.params_path.display());
            for (split, m) in &art.metrics {
                println!(
                    "{split}: acc {:.4}  auc {:.4}  nll {:.4}  (n = {})",
                    m.acc, m.macro_auc, m.nll, m.n
                );
            }
        }
        Command::Distill { config, teacher } => {
            let cfg = config.resolve()?;
            print_config(&cfg);
            let art = cmd_distill(&cfg, teacher.as_deref())?;
            println!("student saved to {}", art.student_path.display());
            if let Some(e) = art.best_epoch {
                println!(
                    "best validation accuracy at epoch {e}{}",
                    if art.stopped_early { " (stopped early)" } else { "" }
                );
            }
            for (split, m) in &art.metrics {
                println!(
                    "{split}: acc {:.4}  auc {:.4}  nll {:.4}  (n = {})",
                    m.acc, m.macro_auc, m.nll, m.n
                );
            }
        }
        Command::Analyze { config } => {
            let cfg = config.resolve()?;
            print_config(&cfg);
            let art = cmd_analyze(&cfg)?;
            for f in &art.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Selfcheck => {
            let lines = cmd_selfcheck();
            let mut all_ok = true;
            for l in &lines {
                println!(
                    "[{}] {} ({})",
                    if l.passed { "PASS" } else { "FAIL" },
                    l.name,
                    l.detail
                );
                all_ok &= l.passed;
            }
            if !all_ok {
                return Err(Error::Numeric("self-check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
