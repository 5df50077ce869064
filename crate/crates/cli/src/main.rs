//! Command-line entry point: reproducible experiments over the attack lab.
//! Verbs: synth, train, attack, defend, sweep, scale-edits. Exit status is 0
//! on success, 1 on validation errors, 2 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use sedlab_core::experiment::{load_config, Experiment, ExperimentError};

#[derive(Parser)]
#[command(name = "sedlab", version, about = "Desk-scale targeted-attack lab for polyphonic sound event detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat key = value with [sections]).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides out_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for scene-parallel stages (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/attack scene datasets.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the reference model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured attack campaign over the attack dataset.
    Attack {
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate stored attack results under the configured defenses.
    Defend {
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the campaign per parameter value (alpha or tau).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Which attack parameter to sweep.
        #[arg(long)]
        param: String,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Re-run the campaign per edit count.
    ScaleEdits {
        #[command(flatten)]
        common: Common,
        /// Comma-separated edit counts.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common }
            | Command::Attack { common }
            | Command::Defend { common }
            | Command::Sweep { common, .. }
            | Command::ScaleEdits { common, .. } => common,
        }
    }
}

fn ratio(stat: sedlab_core::metrics::RatioStat) -> String {
    format!("{stat}")
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let common = cli.command.common();
    if let Some(jobs) = common.jobs {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    let (cfg, hash) = load_config(&common.config)?;
    let exp = Experiment::new(cfg, hash, common.out.clone(), common.seed);

    match &cli.command {
        Command::Synth { .. } => {
            let s = exp.cmd_synth()?;
            println!(
                "synth: {} train + {} val + {} attack scenes under {}",
                s.train,
                s.val,
                s.attack,
                exp.out.join("dataset").display()
            );
        }
        Command::Train { .. } => {
            let s = exp.cmd_train()?;
            println!(
                "train: val micro-F1 {:.4}, final loss {:.4}, checkpoint {}",
                s.val_f1,
                s.final_loss,
                s.checkpoint.display()
            );
        }
        Command::Attack { .. } => {
            let s = exp.cmd_attack()?;
            let agg = &s.outcome.aggregate;
            println!(
                "attack: {} runs ({} skipped); EP {:.4} ASR {} UER {} SNR {} dB",
                agg.n_runs,
                s.outcome.skipped.len(),
                agg.ep,
                ratio(agg.asr),
                ratio(agg.uer),
                agg.snr_mean_db
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "na".into()),
            );
            println!("attack: per-run rows in {}", s.runs_csv.display());
            println!("attack: aggregate row in {}", s.aggregate_csv.display());
        }
        Command::Defend { .. } => {
            let s = exp.cmd_defend()?;
            for (kind, agg) in &s.rows {
                println!(
                    "defend[{}]: EP {:.4} ASR {} UER {} over {} runs",
                    kind.name(),
                    agg.ep,
                    ratio(agg.asr),
                    ratio(agg.uer),
                    agg.n_runs
                );
            }
            println!("defend: summary in {}", s.summary_csv.display());
        }
        Command::Sweep { param, values, .. } => {
            let s = exp.cmd_sweep(param, values)?;
            for (value, agg) in &s.rows {
                println!(
                    "sweep[{param}={value}]: EP {:.4} ASR {} UER {}",
                    agg.ep,
                    ratio(agg.asr),
                    ratio(agg.uer)
                );
            }
            println!("sweep: rows in {}", s.csv.display());
        }
        Command::ScaleEdits { k, .. } => {
            let s = exp.cmd_scale_edits(k)?;
            for (k, agg) in &s.rows {
                println!(
                    "scale-edits[k={k}]: EP {:.4} ASR {} UER {}",
                    agg.ep,
                    ratio(agg.asr),
                    ratio(agg.uer)
                );
            }
            println!("scale-edits: rows in {}", s.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1, // argument problems are validation errors
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
