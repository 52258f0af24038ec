//! Training loop: truncated BPTT over segments of `unroll` steps, Adam,
//! gradient clipping, periodic held-out evaluation and a metrics log.
//!
//! Runs are deterministic for a fixed config and seed. Parameter init,
//! training episodes and held-out episodes come from disjoint seed streams,
//! and batches are consumed in index order whether or not they are
//! prefetched on a background thread.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::config::{CarryMode, LossKind, RunConfig, TaskConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::sequence_loss;
use crate::model::{argmax_rows, Model, ModelState};
use crate::optim::{clip_grad_norm, learning_rate, Adam};
use crate::params::ParamStore;
use crate::tasks::{self, collate, episode_seed, Batch, Episode};
use crate::tensor::Real;

pub const PARAM_STREAM: u64 = 2;
pub const METRICS_HEADER: &str = "step,loss,accuracy,lr";
const EVAL_CHUNK: usize = 256;

/// One line of the metrics log. `loss` is the mean training loss since the
/// previous row; `accuracy` is held-out final-step accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub episodes: usize,
}

pub struct TrainResult {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub metrics: Vec<MetricRow>,
    pub final_eval: EvalMetrics,
    pub steps: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.accuracy, r.lr);
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(Error::Format(format!("metrics header {other:?}, expected `{METRICS_HEADER}`"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("metrics row {}: `{l}`", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                step: f[0].trim().parse().map_err(|_| bad())?,
                loss: f[1].trim().parse().map_err(|_| bad())?,
                accuracy: f[2].trim().parse().map_err(|_| bad())?,
                lr: f[3].trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loss and final-step logits of one batch; with `backward`, also the
/// parameter gradients of each segment, weighted so their sum is the
/// gradient of the batch-mean loss.
struct BatchPass<T: Real> {
    loss: f64,
    predictions: Vec<usize>,
    grads: Vec<Gradients<T>>,
}

fn segments(len: usize, unroll: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len).step_by(unroll.max(1)).map(move |s| s..(s + unroll).min(len))
}

fn run_batch<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch,
    carry: CarryMode,
    kind: LossKind,
    smoothing: f64,
    backward: bool,
) -> Result<BatchPass<T>> {
    let supervised: usize = batch.targets.iter().flatten().filter(|t| t.is_some()).count();
    if supervised == 0 {
        return Err(Error::Usage("batch has no supervised steps".into()));
    }
    let mut state: Option<ModelState<T>> = None;
    let mut loss = 0.0;
    let mut grads = Vec::new();
    let mut predictions = Vec::new();
    for seg in segments(batch.len(), model.config.unroll) {
        let mut tape = Tape::with_params(store);
        let s0 = match (&state, carry) {
            (Some(s), CarryMode::Carry) => model.state_vars(&mut tape, s),
            _ => model.initial_vars(&mut tape, batch.size)?,
        };
        let inputs = batch.steps[seg.clone()]
            .iter()
            .map(|ids| model.embed(&mut tape, ids, batch.size))
            .collect::<Result<Vec<_>>>()?;
        let (outs, fin) = model.unroll(&mut tape, s0, &inputs)?;
        if seg.end == batch.len() {
            predictions = argmax_rows(tape.value(outs[outs.len() - 1].logits));
        }
        let targets = &batch.targets[seg.clone()];
        if let Some(l) = sequence_loss(&mut tape, &outs, targets, kind, smoothing)? {
            let rows = targets.iter().flatten().filter(|t| t.is_some()).count();
            let w = rows as f64 / supervised as f64;
            loss += w * tape.value(l).item()?.as_f64();
            if backward {
                let weighted = tape.scale(l, T::of(w));
                grads.push(tape.backward(weighted)?);
            }
        }
        state = Some(model.snapshot(&tape, fin));
    }
    Ok(BatchPass {
        loss,
        predictions,
        grads,
    })
}

/// Mean loss and final-step accuracy over `episodes`.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    episodes: &[Episode],
    train: &TrainConfig,
) -> Result<EvalMetrics> {
    if episodes.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let (mut loss, mut hits) = (0.0, 0usize);
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let batch = collate(chunk, train.supervision)?;
        let pass = run_batch(model, store, &batch, train.carry, train.loss, train.label_smoothing, false)?;
        loss += pass.loss * chunk.len() as f64;
        hits += pass
            .predictions
            .iter()
            .zip(&batch.final_targets)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(EvalMetrics {
        loss: loss / episodes.len() as f64,
        accuracy: hits as f64 / episodes.len() as f64,
        episodes: episodes.len(),
    })
}

fn make_batch(task: &TaskConfig, train: &TrainConfig, index: usize) -> Result<Batch> {
    let b = train.batch;
    let eps = (0..b)
        .map(|j| tasks::generate(task, episode_seed(train.seed, tasks::TRAIN_STREAM, (index * b + j) as u64)))
        .collect::<Result<Vec<_>>>()?;
    collate(&eps, train.supervision)
}

/// Training batches in index order, optionally produced ahead of use by a
/// worker thread through a bounded queue.
enum BatchSource {
    Inline { task: TaskConfig, train: TrainConfig, next: usize },
    Prefetch(mpsc::Receiver<Result<Batch>>),
}

impl BatchSource {
    fn new(task: &TaskConfig, train: &TrainConfig) -> Self {
        if train.prefetch == 0 {
            return BatchSource::Inline {
                task: task.clone(),
                train: train.clone(),
                next: 0,
            };
        }
        let (tx, rx) = mpsc::sync_channel(train.prefetch);
        let (task, train) = (task.clone(), train.clone());
        thread::spawn(move || {
            for i in 0..train.steps {
                let b = make_batch(&task, &train, i);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        BatchSource::Prefetch(rx)
    }

    fn next(&mut self) -> Result<Batch> {
        match self {
            BatchSource::Inline { task, train, next } => {
                let b = make_batch(task, train, *next);
                *next += 1;
                b
            }
            BatchSource::Prefetch(rx) => rx
                .recv()
                .map_err(|_| Error::Usage("batch producer stopped early".into()))?,
        }
    }
}

/// Trains `cfg` from scratch, calling `on_row` for each metrics row.
pub fn train_with(cfg: &RunConfig, on_row: impl FnMut(&MetricRow)) -> Result<TrainResult> {
    cfg.validate()?;
    let tr = &cfg.train;
    if tr.eval_episodes == 0 {
        return Err(Error::config("train.eval_episodes", "must be positive"));
    }
    let model = Model::new(cfg.model.clone())?;
    let store = model.init(episode_seed(tr.seed, PARAM_STREAM, 0))?;
    train_loop(cfg, model, store, on_row)
}

fn train_loop(
    cfg: &RunConfig,
    model: Model,
    mut store: ParamStore<f32>,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<TrainResult> {
    let tr = &cfg.train;
    let eval_set = eval_corpus(cfg)?;
    let mut adam = Adam::default();
    let mut source = BatchSource::new(&cfg.task, tr);
    let mut metrics = Vec::new();
    let (mut interval_loss, mut interval_n) = (0.0, 0usize);

    for step in 0..tr.steps {
        let lr = learning_rate(tr.schedule, tr.lr, step, tr.steps, tr.warmup);
        let batch = source.next()?;
        let pass = run_batch(&model, &store, &batch, tr.carry, tr.loss, tr.label_smoothing, true)?;
        if !pass.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss = {}", pass.loss),
            });
        }
        store.zero_grads();
        for g in &pass.grads {
            g.accumulate_into(&mut store)?;
        }
        let norm = match tr.clip_norm {
            Some(c) => clip_grad_norm(&mut store, c),
            None => crate::optim::grad_norm(&store),
        };
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("gradient norm = {norm}"),
            });
        }
        adam.step(&mut store, lr);
        interval_loss += pass.loss;
        interval_n += 1;

        if (step + 1) % tr.eval_interval == 0 || step + 1 == tr.steps {
            let ev = evaluate(&model, &store, &eval_set, tr)?;
            let row = MetricRow {
                step: step + 1,
                loss: interval_loss / interval_n as f64,
                accuracy: ev.accuracy,
                lr,
            };
            log::info!(
                "step {:>6}  loss {:.4}  eval acc {:.4}  lr {:.3e}",
                row.step,
                row.loss,
                row.accuracy,
                row.lr
            );
            on_row(&row);
            metrics.push(row);
            interval_loss = 0.0;
            interval_n = 0;
        }
    }
    let final_eval = evaluate(&model, &store, &eval_set, tr)?;
    Ok(TrainResult {
        model,
        store,
        metrics,
        final_eval,
        steps: tr.steps,
    })
}

pub fn train(cfg: &RunConfig) -> Result<TrainResult> {
    train_with(cfg, |_| {})
}

/// The held-out episodes a run evaluates on.
pub fn eval_corpus(cfg: &RunConfig) -> Result<Vec<Episode>> {
    tasks::corpus(&cfg.task, cfg.train.seed, tasks::EVAL_STREAM, cfg.train.eval_episodes)
}

/// Writes `text` to `dir/name`, creating `dir` if needed.
pub fn write_artifact(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        IoConfig, ProcessorKind, Schedule, Supervision, SummarizerVariant, TtmConfig, WriteVariant,
    };

    fn run(steps: usize, lr: f64, prefetch: usize) -> RunConfig {
        let mut model = TtmConfig::tiny(SummarizerVariant::Mlp, ProcessorKind::Mlp, WriteVariant::Ttm);
        model.n = 1;
        model.classes = 3;
        model.input_vocab = tasks::input_vocab(3);
        model.unroll = 2;
        RunConfig {
            model,
            task: TaskConfig::Copy {
                steps: 4,
                n: 1,
                vocab: 3,
                per_step: false,
            },
            train: TrainConfig {
                steps,
                batch: 4,
                lr,
                warmup: 0,
                schedule: Schedule::Cosine,
                seed: 9,
                supervision: Supervision::LastStep,
                carry: CarryMode::Carry,
                loss: LossKind::SoftmaxCe,
                label_smoothing: 0.1,
                clip_norm: Some(1.0),
                eval_interval: 3,
                eval_episodes: 16,
                prefetch,
            },
            io: IoConfig {
                output_dir: String::new(),
            },
        }
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let a = train(&run(7, 1e-2, 0)).unwrap();
        let b = train(&run(7, 1e-2, 2)).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.store, b.store);
        assert_eq!(a.metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 6, 7]);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = run(4, 0.0, 0);
        let r = train(&cfg).unwrap();
        let model = Model::new(cfg.model.clone()).unwrap();
        let init: ParamStore<f32> = model.init(episode_seed(cfg.train.seed, PARAM_STREAM, 0)).unwrap();
        for (name, v) in init.iter() {
            assert_eq!(r.store.get(name).unwrap(), v, "{name}");
        }
    }

    #[test]
    fn segmenting_covers_all_steps() {
        let segs: Vec<_> = segments(7, 3).collect();
        assert_eq!(segs, vec![0..3, 3..6, 6..7]);
        assert_eq!(segments(4, 4).count(), 1);
    }

    #[test]
    fn reset_mode_forgets_earlier_segments() {
        // the distinguishing symbol sits in segment one only
        let cfg = run(1, 1e-2, 0);
        let model = Model::new(cfg.model.clone()).unwrap();
        let store: ParamStore<f64> = model.init(1).unwrap();
        let mk = |first: usize| Episode {
            steps: vec![vec![first], vec![first], vec![6], vec![6]],
            target: 1,
            targets: vec![None, None, None, Some(1)],
            meta: Default::default(),
        };
        let a = collate(&[mk(0)], Supervision::LastStep).unwrap();
        let b = collate(&[mk(2)], Supervision::LastStep).unwrap();
        let pass = |batch: &Batch, carry| {
            run_batch(&model, &store, batch, carry, LossKind::SoftmaxCe, 0.0, false)
                .unwrap()
                .loss
        };
        assert_eq!(pass(&a, CarryMode::Reset), pass(&b, CarryMode::Reset));
        assert_ne!(pass(&a, CarryMode::Carry), pass(&b, CarryMode::Carry));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricRow {
                step: 1,
                loss: 0.5,
                accuracy: 0.25,
                lr: 1e-3,
            },
            MetricRow {
                step: 2,
                loss: 1.0 / 3.0,
                accuracy: 1.0,
                lr: 0.0,
            },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("step,loss,accuracy,lr\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("a,b\n").is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = run(3, 1e-2, 0);
        let model = Model::new(cfg.model.clone()).unwrap();
        let mut store: ParamStore<f32> = model.init(0).unwrap();
        store.get_mut("head.b").unwrap().data_mut()[0] = f32::NAN;
        match train_loop(&cfg, model, store, |_| {}) {
            Err(Error::Divergence { step: 0, .. }) => {}
            Err(e) => panic!("unexpected {e}"),
            Ok(_) => panic!("NaN parameters trained without error"),
        }
    }
}
