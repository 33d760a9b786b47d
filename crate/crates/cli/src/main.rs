use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mde_core::pipeline::{
    cmd_calibrate, cmd_decode, cmd_detect, cmd_evaluate, cmd_run, cmd_synth, cmd_train, format_split_stats,
    PipelineConfig,
};
use mde_core::{par, Error};

/// Mispronunciation detection with a hybrid CTC-attention recognizer.
#[derive(Debug, Parser)]
#[command(name = "mde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth(Common),
    /// Train a model on the corpus.
    Train(Common),
    /// Decode a split into hypotheses and posteriorgrams.
    Decode(WithSplit),
    /// Fit the confidence threshold on the dev split.
    Calibrate(Common),
    /// Write per-position verdicts for a split.
    Detect(WithSplit),
    /// Score verdicts against the annotations.
    Evaluate(WithSplit),
    /// Train, decode, detect and evaluate every configured variant.
    Run(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set decode.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct WithSplit {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "test")]
    split: String,
}

impl Common {
    fn load(&self) -> mde_core::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config, &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn execute(command: Command) -> mde_core::Result<()> {
    let common = match &command {
        Command::Synth(c) | Command::Train(c) | Command::Calibrate(c) | Command::Run(c) => c,
        Command::Decode(s) | Command::Detect(s) | Command::Evaluate(s) => &s.common,
    };
    if common.jobs == Some(0) {
        return Err(Error::invalid("--jobs must be at least 1"));
    }
    let cfg = common.load()?;
    par::with_jobs(common.jobs, || match &command {
        Command::Synth(_) => {
            let stats = cmd_synth(&cfg)?;
            print!("{}", format_split_stats(&stats));
            println!("corpus written to {}", cfg.paths.corpus.display());
            Ok(())
        }
        Command::Train(_) => {
            let outcome = cmd_train(&cfg)?;
            let last = outcome.trace.last().expect("at least one epoch");
            println!(
                "trained {} epochs (kept epoch {}), final train loss {:.4}",
                outcome.trace.len(),
                outcome.best_epoch,
                last.train
            );
            println!("checkpoint written to {}", cfg.paths.checkpoint.display());
            Ok(())
        }
        Command::Decode(s) => {
            let hyps = cmd_decode(&cfg, &s.split)?;
            println!("decoded {} utterances from {}", hyps.len(), s.split);
            Ok(())
        }
        Command::Calibrate(_) => {
            let cal = cmd_calibrate(&cfg)?;
            println!(
                "tau {:.6} ({}), dev f1 {:.3}, dev recall {:.3}",
                cal.tau,
                cal.polarity.name(),
                cal.dev_f1,
                cal.dev_recall
            );
            Ok(())
        }
        Command::Detect(s) => {
            let utts = cmd_detect(&cfg, &s.split)?;
            let positions: usize = utts.iter().map(|u| u.verdicts.len()).sum();
            let flagged: usize = utts
                .iter()
                .flat_map(|u| &u.verdicts)
                .filter(|v| v.is_mispronounced())
                .count();
            println!("{flagged} of {positions} positions flagged in {}", s.split);
            Ok(())
        }
        Command::Evaluate(s) => {
            let (_, table) = cmd_evaluate(&cfg, &s.split, &cfg.label())?;
            print!("{}", table.text);
            Ok(())
        }
        Command::Run(_) => {
            let report = cmd_run(&cfg)?;
            print!("{}", report.table.text);
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
