use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use contextseg::cli;
use contextseg::config::RunConfig;
use contextseg::{Error, Result};

#[derive(Parser)]
#[command(name = "contextseg", about = "Global-context segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys, e.g. --set train.max_iter=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut text = match &self.config {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        for o in &self.overrides {
            if !o.contains('=') {
                return Err(Error::Config(format!(
                    "--set expects KEY=VALUE, got '{o}'"
                )));
            }
            text.push('\n');
            text.push_str(o);
        }
        RunConfig::parse(&text)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val dataset
    Gen(ConfigArgs),
    /// Train a network on the generated dataset
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the val split
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient check of all fusion modes
    Gradcheck(ConfigArgs),
    /// Probe theoretical and empirical receptive fields
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(args) => {
            let cfg = args.load()?;
            let (train_manifest, val_manifest) = cli::run_gen(&cfg)?;
            println!("{}", train_manifest.display());
            println!("{}", val_manifest.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = cli::run_train(&cfg)?;
            println!(
                "initial loss {}, final loss {}",
                outcome.initial_loss, outcome.final_loss
            );
            if let Some(miu) = outcome.best_val_mean_iu {
                println!("best val mean_iu {miu}");
            }
            println!("final checkpoint {}", outcome.final_checkpoint.display());
            println!("log {}", outcome.log_path.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = config.load()?;
            let outcome = cli::run_eval(&cfg, &checkpoint)?;
            println!("{}", cli::METRICS_HEADER);
            println!(
                "{},{},{},{}",
                outcome.aggregate.pixel_acc,
                outcome.aggregate.mean_acc,
                outcome.aggregate.mean_iu,
                outcome.aggregate.fw_iu
            );
            println!("metrics {}", outcome.metrics_path.display());
        }
        Command::Gradcheck(args) => {
            let cfg = args.load()?;
            let reports = cli::run_gradcheck(&cfg)?;
            let mut all_pass = true;
            for (mode, report) in &reports {
                println!("fusion mode {mode}:");
                print!("{}", report.render());
                all_pass &= report.pass;
            }
            if !all_pass {
                return Err(Error::Numerical {
                    iter: 0,
                    msg: "gradient check failed".into(),
                });
            }
        }
        Command::Probe { config, checkpoint } => {
            let cfg = config.load()?;
            let outcome = cli::run_probe(&cfg, checkpoint.as_deref())?;
            println!("theoretical box {}", outcome.theoretical.to_csv_line());
            match outcome.empirical {
                Some(b) => println!("empirical box {}", b.to_csv_line()),
                None => println!("empirical box empty (all-zero sensitivity map)"),
            }
            println!("coverage_ratio {}", outcome.coverage_ratio);
            println!("heatmap {}", outcome.heatmap_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
