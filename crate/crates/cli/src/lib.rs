//! Subcommands of the `ttm` binary as plain functions, so tests can drive
//! them without spawning processes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ttm_core::checkpoint::{self, Manifest};
use ttm_core::config::{
    ProcessorKind, SummarizerVariant, TtmConfig, WriteVariant, ALL_PROCESSORS, ALL_SUMMARIZERS, ALL_WRITES,
};
use ttm_core::flops::{self, Descriptor};
use ttm_core::gradcheck::{grad_check, jitter, GradCheckReport};
use ttm_core::model::ModelState;
use ttm_core::tasks::{self, Episode};
use ttm_core::train::{self, EvalMetrics, MetricRow};
use ttm_core::{Model, RunConfig, Tape, Tensor};

pub mod plot;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const CONFIG: &str = "config.json";
pub const EVAL_CORPUS: &str = "eval.jsonl";
pub const FINAL_METRICS: &str = "final_metrics.json";

/// Reads a run config and applies command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.io.output_dir = o.display().to_string();
    }
    Ok(cfg)
}

/// `TTM_THREADS=1` keeps batch generation on the training thread. Batches
/// are a pure function of the seed, so this never changes results.
pub fn apply_thread_cap(cfg: &mut RunConfig, threads: Option<usize>) {
    if threads.is_some_and(|t| t <= 1) {
        cfg.train.prefetch = 0;
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.io.output_dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Writes `count` episodes of the configured task to
/// `output_dir/{train,eval}.jsonl`. The eval split is the held-out set
/// `cmd_train` scores against.
pub fn cmd_gen(cfg: &RunConfig, split: Split, count: usize) -> Result<PathBuf> {
    let (stream, name) = match split {
        Split::Train => (tasks::TRAIN_STREAM, "train.jsonl"),
        Split::Eval => (tasks::EVAL_STREAM, EVAL_CORPUS),
    };
    let episodes = tasks::corpus(&cfg.task, cfg.train.seed, stream, count)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    tasks::write_jsonl(&path, &episodes)?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRow>,
    pub final_eval: EvalMetrics,
    pub dir: PathBuf,
}

/// Trains from scratch and writes the config, metrics log, checkpoint,
/// held-out corpus and final metrics under `output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    train::write_artifact(&dir, CONFIG, &cfg.to_canonical_json()?)?;
    let result = train::train(cfg)?;
    train::write_artifact(&dir, METRICS, &train::metrics_csv(&result.metrics))?;
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.train.seed,
        step: result.steps,
    };
    checkpoint::save_checkpoint(&dir.join(CHECKPOINT), &manifest, &result.store)?;
    tasks::write_jsonl(&dir.join(EVAL_CORPUS), &train::eval_corpus(cfg)?)?;
    train::write_artifact(&dir, FINAL_METRICS, &serde_json::to_string_pretty(&result.final_eval)?)?;
    Ok(TrainOutcome {
        metrics: result.metrics,
        final_eval: result.final_eval,
        dir,
    })
}

fn load(checkpoint: &Path) -> Result<(Manifest, ttm_core::ParamStore<f32>, Model)> {
    if !checkpoint.is_file() {
        bail!("checkpoint not found: {}", checkpoint.display());
    }
    let (manifest, store) = checkpoint::load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = Model::new(manifest.config.model.clone())?;
    Ok((manifest, store, model))
}

fn load_corpus(path: &Path) -> Result<Vec<Episode>> {
    tasks::read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

/// Loss and final-step accuracy of a checkpoint on a corpus.
pub fn cmd_eval(checkpoint: &Path, corpus: &Path) -> Result<EvalMetrics> {
    let (manifest, store, model) = load(checkpoint)?;
    let episodes = load_corpus(corpus)?;
    Ok(train::evaluate(&model, &store, &episodes, &manifest.config.train)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckLine {
    pub summarizer: SummarizerVariant,
    pub processor: ProcessorKind,
    pub write: WriteVariant,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_BATCH: usize = 2;
/// Three steps, so every write's parameters act on non-zero memory that a
/// later step reads.
pub const GRADCHECK_STEPS: usize = 3;
/// Noise added to the initialisation before checking.
pub const GRADCHECK_JITTER: f64 = 0.3;

/// Gradient check of a three-step unroll for every summarizer, processor and
/// write variant at the dimensions of `base`, in 64-bit.
pub fn cmd_gradcheck(base: &TtmConfig, seed: u64) -> Result<Vec<GradCheckLine>> {
    let mut lines = Vec::new();
    for s in ALL_SUMMARIZERS {
        for p in ALL_PROCESSORS {
            for w in ALL_WRITES {
                let mut cfg = base.clone();
                cfg.summarizer = s;
                cfg.processor.kind = p;
                cfg.write = w;
                let report = check_one(&cfg, seed)
                    .with_context(|| format!("gradcheck {s:?}/{p:?}/{w:?}"))?;
                lines.push(GradCheckLine {
                    summarizer: s,
                    processor: p,
                    write: w,
                    max_rel_err: report.max_rel_err,
                    worst_param: report.worst_param.clone(),
                    checked: report.checked,
                    passed: report.passed(),
                    failure: report.failure,
                });
            }
        }
    }
    Ok(lines)
}

fn check_one(cfg: &TtmConfig, seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(cfg.clone())?;
    let mut store = model.init::<f64>(seed)?;
    jitter(&mut store, seed, GRADCHECK_JITTER);
    let b = GRADCHECK_BATCH;
    let ids = |step: usize| -> Vec<usize> {
        (0..b * cfg.n)
            .map(|i| (tasks::episode_seed(seed, step as u64, i as u64) % cfg.input_vocab as u64) as usize)
            .collect()
    };
    let inputs: Vec<Vec<usize>> = (0..GRADCHECK_STEPS).map(ids).collect();
    let targets: Vec<Option<usize>> = (0..b).map(|i| Some(i % cfg.classes)).collect();
    Ok(grad_check(&mut store, GRADCHECK_EPS, GRADCHECK_TOL, |tape| {
        let s = model.initial_vars(tape, b)?;
        let xs = inputs.iter().map(|x| model.embed(tape, x, b)).collect::<ttm_core::Result<Vec<_>>>()?;
        let (outs, _) = model.unroll(tape, s, &xs)?;
        tape.softmax_cross_entropy(outs[GRADCHECK_STEPS - 1].logits, &targets, 0.1)
    })?)
}

/// Named descriptors loaded from files holding either a model config, a
/// full run config, or a causal-cache reference.
pub fn load_descriptors(paths: &[PathBuf]) -> Result<Vec<(String, Descriptor)>> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| p.display().to_string())?;
            let desc = match v.get("model") {
                Some(m) if v.get("train").is_some() => Descriptor::from_json(&m.to_string()),
                _ => Descriptor::from_json(&text),
            }
            .with_context(|| p.display().to_string())?;
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, desc))
        })
        .collect()
}

/// Per-step FLOP report at step `t` (1-based) as CSV.
pub fn cmd_flops(descriptors: &[(String, Descriptor)], t: u64) -> Result<String> {
    Ok(flops::compare(descriptors, t)?)
}

/// Learning-curve SVG for a metrics CSV.
pub fn cmd_plot(metrics_csv: &str, title: &str) -> Result<String> {
    let rows = train::parse_metrics_csv(metrics_csv)?;
    if rows.is_empty() {
        bail!("metrics file has no rows");
    }
    Ok(plot::learning_curve(&rows, title))
}

#[derive(Clone, Debug)]
pub struct MemoryDump {
    /// `[1, rows, d]`.
    pub state: Tensor<f32>,
    /// Read attention `[k, p]` at the dumped step, when the summarizer has one.
    pub read_weights: Option<Tensor<f32>>,
    pub write_weights: Option<Tensor<f32>>,
}

/// Runs episode `episode` of `corpus` for `step` steps (1-based) and
/// returns the state left after that step.
pub fn cmd_dump_memory(checkpoint: &Path, corpus: &Path, episode: usize, step: usize) -> Result<MemoryDump> {
    let (_, store, model) = load(checkpoint)?;
    let episodes = load_corpus(corpus)?;
    let ep = episodes
        .get(episode)
        .with_context(|| format!("corpus has {} episodes, asked for index {episode}", episodes.len()))?;
    if step == 0 || step > ep.len() {
        bail!("step must be in 1..={}, got {step}", ep.len());
    }
    let mut tape = Tape::with_params(&store);
    let mut state = model.initial_vars(&mut tape, 1)?;
    let mut last = None;
    for ids in &ep.steps[..step] {
        let x = model.embed(&mut tape, ids, 1)?;
        let (out, next) = model.step(&mut tape, state, x)?;
        state = next;
        last = Some(out);
    }
    let out = last.expect("step >= 1");
    let weights = |v: Option<ttm_core::Var>| -> Result<Option<Tensor<f32>>> {
        v.map(|v| {
            let w = tape.value(v);
            let s = w.shape().to_vec();
            Ok(w.clone().reshape(&s[s.len() - 2..])?)
        })
        .transpose()
    };
    let read_weights = weights(out.read_weights)?;
    let write_weights = weights(out.write_weights)?;
    let state = match model.snapshot(&tape, state) {
        ModelState::Memory(m) | ModelState::Tokens(m) => m,
        ModelState::Lstm { h, .. } => {
            let d = h.shape()[1];
            h.reshape(&[1, 1, d])?
        }
    };
    Ok(MemoryDump {
        state,
        read_weights,
        write_weights,
    })
}

/// Writes the snapshot to `dir/memory_step{step}.bin` plus, if requested,
/// attention CSVs alongside it. Returns the written paths.
pub fn write_memory_dump(dir: &Path, step: usize, dump: &MemoryDump, with_weights: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("memory_step{step}.bin"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    checkpoint::write_memory(&mut f, &dump.state)?;
    std::io::Write::flush(&mut f)?;
    let mut written = vec![path];
    if with_weights {
        for (name, w) in [("read", &dump.read_weights), ("write", &dump.write_weights)] {
            if let Some(w) = w {
                let p = dir.join(format!("{name}_weights_step{step}.csv"));
                std::fs::write(&p, weights_csv(w))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// One output token per row, one input token per column.
pub fn weights_csv(w: &Tensor<f32>) -> String {
    let cols = w.shape()[w.rank() - 1];
    let mut s = String::new();
    for row in w.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(s, "{}", cells.join(",")).expect("string write");
    }
    s
}
