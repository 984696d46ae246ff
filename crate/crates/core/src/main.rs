use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgbt_crowd::harness::{self, Axis, Overrides, RunConfig};
use rgbt_crowd::Error;

#[derive(Parser)]
#[command(name = "rgbt-crowd", version, about = "Two-stage RGB-thermal crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; CLI flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with train/, val/ and test/.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ka: Option<usize>,
    #[arg(long)]
    kn: Option<usize>,
    #[arg(long)]
    lambda_cons: Option<f64>,
    /// Sets the consistency weight to 0.
    #[arg(long)]
    no_cons: bool,
    /// Skips stage 1 and starts stage 2 from fresh parameters.
    #[arg(long)]
    no_pretrain: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, Error> {
        let o = Overrides {
            seed: self.seed,
            epochs: self.epochs,
            ka: self.ka,
            kn: self.kn,
            lambda_cons: self.lambda_cons,
            no_cons: self.no_cons,
        };
        RunConfig::load(self.config.as_deref())?.resolve(&o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset to --data.
    Synth(Common),
    /// Stage 1 on --data/train; checkpoint lands in --out.
    Pretrain(Common),
    /// Stage 2 on --data/train, validated on --data/val.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Metrics and heatmaps of a trained checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// One training run per value of an axis, reported on --data/test.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// ka | kn | lambda-cons | fusion | component
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis defaults when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.run_config()?;
            for s in harness::cmd_synth(&cfg, &c.data)? {
                println!(
                    "{:5} {:4} samples, {:5} points (min {}, max {}, mean {:.2}), {} dark, {} clutter",
                    s.split, s.samples, s.points_total, s.points_min, s.points_max, s.points_mean, s.dark, s.clutter
                );
            }
        }
        Command::Pretrain(c) => {
            let cfg = c.run_config()?;
            let s = harness::cmd_pretrain(&cfg, &c.data, &c.out)?;
            println!("checkpoint {}", s.checkpoint.display());
            if let (Some(a), Some(b)) = (s.initial_loss, s.final_loss) {
                println!("L_warm {a:.4} -> {b:.4} over {} steps", s.steps);
            }
            match s.shift_recovery {
                Some(r) => println!("stage-1 shift recovery on val: {r:.4}"),
                None => println!("stage-1 shift recovery on val: n/a"),
            }
        }
        Command::Train { common: c, pretrained } => {
            let cfg = c.run_config()?;
            let ck = if c.no_pretrain { None } else { pretrained };
            let s = harness::cmd_train(&cfg, &c.data, &c.out, ck.as_deref())?;
            println!("best epoch {}: {}", s.best_epoch, harness::metrics_line(&s.best));
            println!("checkpoint {}", s.best_checkpoint.display());
        }
        Command::Eval { common: c, ckpt, split } => {
            let s = harness::cmd_eval(&ckpt, &c.data.join(&split), &c.out)?;
            println!("{} samples: {}", s.samples, harness::metrics_line(&s.metrics));
        }
        Command::Ablate { common: c, axis, values } => {
            let cfg = c.run_config()?;
            let axis: Axis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            for r in harness::cmd_ablate(&cfg, &c.data, &c.out, axis, &values, !c.no_pretrain)? {
                println!("{}={}: {}", axis.name(), r.value, harness::metrics_line(&r.metrics));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config(_) | Error::FingerprintMismatch { .. } => 2,
                e if e.is_data_error() => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
