use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddghm_cli::{
    cmd_evaluate, cmd_gradcheck, cmd_preprocess, cmd_train, exit_code, load_config, SplitChoice, GRADCHECK_THRESHOLD,
};
use ddghm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ddghm", version, about = "Cross-domain sequential recommendation with dual dynamic graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and window a raw interaction log into per-user sequence triples.
    Preprocess {
        /// Tab-separated `user item rating timestamp domain` lines.
        input: PathBuf,
        #[arg(long, env = "DDGHM_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, epoch log and run manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "DDGHM_CONFIG")]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank held-out items with a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Also write `<out>.tsv` and `<out>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training objective on a toy instance.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn with_suffix(base: &std::path::Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Preprocess { input, config, out } => {
            let cfg = load_config(config.as_deref(), std::env::vars())?;
            let outcome = cmd_preprocess(&input, &cfg, &out)?;
            if outcome.rejected_lines > 0 {
                println!("rejected lines\t{}", outcome.rejected_lines);
            }
            println!("{}", outcome.stats);
            Ok(0)
        }
        Command::Train { data, config, seed, out } => {
            let mut cfg = load_config(config.as_deref(), std::env::vars())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let summary = cmd_train(&data, &cfg, config.as_deref(), &out)?;
            println!("best epoch\t{}", summary.best_epoch);
            if let Some(t) = summary.test {
                print!("{}", t.to_tsv());
            }
            Ok(0)
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            cutoffs,
            out,
        } => {
            let table = cmd_evaluate(&checkpoint, &data, split, cutoffs.as_deref())?;
            print!("{}", table.to_tsv());
            if let Some(base) = out {
                std::fs::write(with_suffix(&base, ".tsv"), table.to_tsv())?;
                std::fs::write(with_suffix(&base, ".json"), serde_json::to_string_pretty(&table.to_json())? + "\n")?;
            }
            Ok(0)
        }
        Command::Gradcheck { seed, dim, eps } => {
            let report = cmd_gradcheck(seed, dim, eps)?;
            println!("entries checked\t{}", report.entries_checked);
            println!("max relative error\t{:.3e}", report.max_relative_error);
            if let Some((name, k)) = &report.worst {
                println!("worst entry\t{name}[{k}]\tanalytic {:.6e}\tnumeric {:.6e}", report.analytic, report.numeric);
            }
            if report.max_relative_error < GRADCHECK_THRESHOLD {
                println!("PASS (< {GRADCHECK_THRESHOLD:e})");
                Ok(0)
            } else {
                println!("FAIL (>= {GRADCHECK_THRESHOLD:e})");
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DDGHM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::DatasetExhausted(_) = e {
                eprintln!("no sequences written");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
