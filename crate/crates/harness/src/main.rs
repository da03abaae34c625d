use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmcd_harness::commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_report, cmd_sweep_t, cmd_train};
use mmcd_harness::{HarnessError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "mmcd", version, about = "Multimodal semantic and height change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(&self.preset)?,
        };
        let config = config.with_seed(self.seed);
        config.validate()?;
        Ok(config)
    }
}

fn data_dir(explicit: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    explicit
        .clone()
        .or_else(|| config.data_dir.clone())
        .ok_or_else(|| HarnessError::Config("no dataset directory: pass --data or set data_dir".into()))
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and write train/val/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained model on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding the trained model.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate the five task combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate one model per soft-threshold temperature.
    SweepT {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated temperatures; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<f64>>,
    },
    /// Summarize the results found in a directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let config = common.load()?;
            let m = cmd_generate(&config, &common.out)?;
            println!("tiles train/val/test: {}/{}/{}", m.tiles[0], m.tiles[1], m.tiles[2]);
        }
        Command::Train { common, data } => {
            let config = common.load()?;
            let s = cmd_train(&config, &data_dir(&data, &config)?, &common.out)?;
            if let Some(last) = s.records.last() {
                println!("{} steps, final loss {:.6}", s.steps, last.loss_total);
            }
        }
        Command::Eval { common, data, checkpoint, split } => {
            let config = common.load()?;
            let split = split.unwrap_or_else(|| config.eval_split.clone());
            let e = cmd_eval(&config, &checkpoint, &data_dir(&data, &config)?, &split, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&e.report).expect("plain report"));
        }
        Command::Ablate { common, data } => {
            let config = common.load()?;
            let rows = cmd_ablate(&config, &data_dir(&data, &config)?, &common.out)?;
            print!("{}", mmcd_harness::commands::table_text(&rows));
        }
        Command::SweepT { common, data, t } => {
            let config = common.load()?;
            let ts = t.unwrap_or_else(|| config.sweep_temperatures.clone());
            let entries = cmd_sweep_t(&config, &ts, &data_dir(&data, &config)?, &common.out)?;
            println!("{} temperature runs written", entries.len());
        }
        Command::Report { common, input } => {
            print!("{}", cmd_report(&input, &common.out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
