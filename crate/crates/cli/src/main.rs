use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ttm_cli::{
    apply_thread_cap, cmd_dump_memory, cmd_eval, cmd_flops, cmd_gen, cmd_gradcheck, cmd_plot, cmd_train,
    load_config, load_descriptors, write_memory_dump, Split,
};
use ttm_core::config::{ProcessorKind, SummarizerVariant, TtmConfig, WriteVariant};

#[derive(Parser)]
#[command(name = "ttm", version, about = "Token Turing Machine experiments on synthetic sequence tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Write an episode corpus as JSON lines.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Episodes to write; defaults to `train.eval_episodes`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train from scratch; writes metrics, checkpoint and held-out corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus and print metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also write the metrics to DIR/eval_metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check over every variant combination.
    Gradcheck {
        /// Run config whose model dimensions are used; tiny defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report to DIR/gradcheck.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate in 64-bit floats. The check always runs in 64-bit;
        /// the flag is accepted for explicitness.
        #[arg(long = "64bit")]
        wide: bool,
    },
    /// Per-step FLOP report for one or more configs as CSV.
    Flops {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// 1-based step index at which to evaluate.
        #[arg(long, default_value_t = 1)]
        t: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics CSV as an SVG learning curve.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Output file; defaults to the metrics path with an .svg extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the recurrent state after a given step of one episode.
    DumpMemory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// 1-based step after which the state is captured.
        #[arg(long)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the read/write summarizer weights as CSV.
        #[arg(long)]
        weights: bool,
    },
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("TTM_THREADS") {
        Ok(v) => Ok(Some(v.parse().with_context(|| format!("TTM_THREADS={v} is not a count"))?)),
        Err(_) => Ok(None),
    }
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let p = dir.join(name);
            std::fs::write(&p, text)?;
            println!("{}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out, split, count } => {
            let cfg = load_config(&config, seed, out.as_deref())?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let path = cmd_gen(&cfg, split, count.unwrap_or(cfg.train.eval_episodes))?;
            println!("{}", path.display());
        }
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(&config, seed, out.as_deref())?;
            apply_thread_cap(&mut cfg, threads()?);
            let outcome = cmd_train(&cfg)?;
            println!("{}", serde_json::to_string(&outcome.final_eval)?);
        }
        Command::Eval { checkpoint, corpus, out } => {
            let m = cmd_eval(&checkpoint, &corpus)?;
            let text = serde_json::to_string_pretty(&m)? + "\n";
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("eval_metrics.json"), &text)?;
            }
            print!("{text}");
        }
        Command::Gradcheck { config, seed, out, wide: _ } => {
            let base = match config {
                Some(p) => load_config(&p, None, None)?.model,
                None => TtmConfig::tiny(SummarizerVariant::Mlp, ProcessorKind::Transformer, WriteVariant::Ttm),
            };
            let lines = cmd_gradcheck(&base, seed)?;
            for l in &lines {
                println!(
                    "{} {:?}/{:?}/{:?} max_rel_err={:.3e} worst={} checked={}",
                    if l.passed { "PASS" } else { "FAIL" },
                    l.summarizer,
                    l.processor,
                    l.write,
                    l.max_rel_err,
                    l.worst_param,
                    l.checked
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&lines)?)?;
            }
            let failed = lines.iter().filter(|l| !l.passed).count();
            if failed > 0 {
                bail!("{failed} of {} combinations failed the gradient check", lines.len());
            }
        }
        Command::Flops { configs, t, out } => {
            let csv = cmd_flops(&load_descriptors(&configs)?, t)?;
            write_or_print(out.as_deref(), "flops.csv", &csv)?;
        }
        Command::Plot { metrics, out } => {
            let text = std::fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let title = metrics.parent().and_then(|p| p.file_name()).map_or_else(
                || metrics.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            let svg = cmd_plot(&text, &title)?;
            let out = out.unwrap_or_else(|| metrics.with_extension("svg"));
            std::fs::write(&out, svg)?;
            println!("{}", out.display());
        }
        Command::DumpMemory { checkpoint, corpus, step, episode, out, weights } => {
            let dump = cmd_dump_memory(&checkpoint, &corpus, episode, step)?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            for p in write_memory_dump(&dir, step, &dump, weights)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
