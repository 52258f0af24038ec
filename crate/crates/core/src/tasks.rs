//! Synthetic sequential tasks that need external memory to solve.
//!
//! All tasks share one symbol layout for a content vocabulary of size `v`:
//!
//! | ids          | meaning                        |
//! |--------------|--------------------------------|
//! | `0..v`       | content symbols (= class ids)  |
//! | `v..2v`      | the same symbols in key role   |
//! | `2v`         | blank                          |
//! | `2v + 1`     | query marker                   |
//!
//! Generators are pure functions of their parameters and a seed.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Supervision, TaskConfig};
use crate::error::{Error, Result};

/// Rows of the embedding table needed for a content vocabulary.
pub const fn input_vocab(vocab: usize) -> usize {
    2 * vocab + 2
}

pub const fn key_symbol(vocab: usize, s: usize) -> usize {
    vocab + s
}

pub const fn blank(vocab: usize) -> usize {
    2 * vocab
}

pub const fn query(vocab: usize) -> usize {
    2 * vocab + 1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub task: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<usize>,
    /// Step holding the symbol to recall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    /// `T` steps of `n` symbol ids each.
    pub steps: Vec<Vec<usize>>,
    /// Class expected at the final step.
    pub target: usize,
    /// Per-step classes; `None` marks an unsupervised step.
    pub targets: Vec<Option<usize>>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn last_only(steps: Vec<Vec<usize>>, target: usize, meta: EpisodeMeta) -> Self {
        let mut targets = vec![None; steps.len()];
        targets[steps.len() - 1] = Some(target);
        Self {
            steps,
            target,
            targets,
            meta,
        }
    }
}

/// Symbols for the first `T/2` steps, blanks after; the final target is the
/// first symbol shown. With `per_step`, step `t ≥ T/2` is labelled with the
/// first symbol of step `t - T/2`.
pub fn gen_copy(steps: usize, n: usize, vocab: usize, per_step: bool, seed: u64) -> Result<Episode> {
    if vocab < 2 {
        return Err(Error::config("task.vocab", "copy needs vocab >= 2"));
    }
    if steps < 2 || n == 0 {
        return Err(Error::config("task.steps", "copy needs steps >= 2 and n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = steps / 2;
    let seq: Vec<Vec<usize>> = (0..steps)
        .map(|t| {
            (0..n)
                .map(|_| if t < half { rng.gen_range(0..vocab) } else { blank(vocab) })
                .collect()
        })
        .collect();
    let meta = EpisodeMeta {
        task: "copy".into(),
        seed,
        gap: None,
        key_step: Some(0),
    };
    if !per_step {
        let target = seq[0][0];
        return Ok(Episode::last_only(seq, target, meta));
    }
    let targets: Vec<Option<usize>> = (0..steps)
        .map(|t| (t >= half).then(|| seq[t - half][0]))
        .collect();
    Ok(Episode {
        target: targets[steps - 1].expect("final step is in the output phase"),
        targets,
        steps: seq,
        meta,
    })
}

/// A key-role symbol appears in a random slot at step `t₀ = T-1-gap`; the
/// final step is all query markers and is labelled with the key. Every other
/// slot holds a random content symbol. With `gap = 0` the key shares the
/// final step with query markers.
pub fn gen_delayed_recall(steps: usize, gap: usize, vocab: usize, n: usize, seed: u64) -> Result<Episode> {
    if vocab < 2 {
        return Err(Error::config("task.vocab", "delayed recall needs vocab >= 2"));
    }
    if n == 0 {
        return Err(Error::config("task.n", "must be positive"));
    }
    if steps == 0 || gap >= steps {
        return Err(Error::config("task.gap", format!("gap {gap} needs steps > gap, got {steps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = steps - 1 - gap;
    let key = rng.gen_range(0..vocab);
    let slot = rng.gen_range(0..n);
    let mut seq: Vec<Vec<usize>> = (0..steps)
        .map(|t| {
            (0..n)
                .map(|_| if t == steps - 1 { query(vocab) } else { rng.gen_range(0..vocab) })
                .collect()
        })
        .collect();
    seq[t0][slot] = key_symbol(vocab, key);
    Ok(Episode::last_only(
        seq,
        key,
        EpisodeMeta {
            task: "delayed_recall".into(),
            seed,
            gap: Some(gap),
            key_step: Some(t0),
        },
    ))
}

/// `pairs` steps of `[key, value]` with distinct keys, then
/// `[query, key]` for one of them; the target is its value.
pub fn gen_assoc_recall(pairs: usize, vocab: usize, seed: u64) -> Result<Episode> {
    if pairs == 0 || pairs > vocab {
        return Err(Error::config(
            "task.pairs",
            format!("need 1 <= pairs <= vocab ({vocab}), got {pairs}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<usize> = (0..vocab).collect();
    keys.shuffle(&mut rng);
    keys.truncate(pairs);
    let values: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..vocab)).collect();
    let asked = rng.gen_range(0..pairs);
    let mut seq: Vec<Vec<usize>> = keys
        .iter()
        .zip(&values)
        .map(|(&k, &v)| vec![key_symbol(vocab, k), v])
        .collect();
    seq.push(vec![query(vocab), key_symbol(vocab, keys[asked])]);
    Ok(Episode::last_only(
        seq,
        values[asked],
        EpisodeMeta {
            task: "assoc_recall".into(),
            seed,
            gap: Some(pairs - asked),
            key_step: Some(asked),
        },
    ))
}

pub fn generate(task: &TaskConfig, seed: u64) -> Result<Episode> {
    match *task {
        TaskConfig::Copy {
            steps,
            n,
            vocab,
            per_step,
        } => gen_copy(steps, n, vocab, per_step, seed),
        TaskConfig::DelayedRecall { steps, gap, vocab, n } => gen_delayed_recall(steps, gap, vocab, n, seed),
        TaskConfig::AssocRecall { pairs, vocab } => gen_assoc_recall(pairs, vocab, seed),
    }
}

/// Seed of episode `index` in an independent `stream` derived from `base`
/// (splitmix64 finaliser over the combined words).
pub fn episode_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const TRAIN_STREAM: u64 = 0;
pub const EVAL_STREAM: u64 = 1;

pub fn corpus(task: &TaskConfig, base: u64, stream: u64, count: usize) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| generate(task, episode_seed(base, stream, i)))
        .collect()
}

/// Episodes laid out step-major for a batched forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub tokens_per_step: usize,
    /// `steps[t]` holds `size × tokens_per_step` ids, episode-major.
    pub steps: Vec<Vec<usize>>,
    /// `targets[t][b]`, already filtered by the supervision mode.
    pub targets: Vec<Vec<Option<usize>>>,
    /// Final-step class per episode.
    pub final_targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn collate(episodes: &[Episode], supervision: Supervision) -> Result<Batch> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Usage("cannot collate an empty batch".into()))?;
    let (t_len, n) = (first.len(), first.steps.first().map_or(0, Vec::len));
    let mut steps = vec![Vec::with_capacity(episodes.len() * n); t_len];
    let mut targets = vec![Vec::with_capacity(episodes.len()); t_len];
    for ep in episodes {
        if ep.len() != t_len || ep.steps.iter().any(|s| s.len() != n) || ep.targets.len() != t_len {
            return Err(Error::Format(format!(
                "ragged episode (seed {}) in batch of {t_len}×{n}",
                ep.meta.seed
            )));
        }
        for t in 0..t_len {
            steps[t].extend_from_slice(&ep.steps[t]);
            let label = match supervision {
                Supervision::LastStep => (t + 1 == t_len).then_some(ep.target),
                Supervision::AllSteps => ep.targets[t],
            };
            targets[t].push(label);
        }
    }
    Ok(Batch {
        size: episodes.len(),
        tokens_per_step: n,
        steps,
        targets,
        final_targets: episodes.iter().map(|e| e.target).collect(),
    })
}

/// Fraction of equal pairs.
pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Usage("accuracy of an empty set".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape("accuracy", &[predictions.len()], &[targets.len()]));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_definition() {
        for seed in 0..20 {
            let ep = gen_copy(2, 1, 2, false, seed).unwrap();
            assert_eq!(ep.steps[1], vec![blank(2)]);
            assert_eq!(ep.target, ep.steps[0][0]);
            assert!(ep.target < 2);
            assert_eq!(ep.targets, vec![None, Some(ep.target)]);
        }
        let ep = gen_copy(6, 2, 5, true, 3).unwrap();
        for t in 3..6 {
            assert_eq!(ep.targets[t], Some(ep.steps[t - 3][0]));
        }
        assert!(ep.targets[..3].iter().all(Option::is_none));
        assert!(gen_copy(4, 1, 1, false, 0).is_err());
    }

    #[test]
    fn copy_class_balance() {
        let vocab = 4;
        let mut counts = [0usize; 4];
        let total = 10_000;
        for seed in 0..total {
            counts[gen_copy(4, 1, vocab, false, seed).unwrap().target] += 1;
        }
        for c in counts {
            assert!((c as f64 / total as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn delayed_recall_layout() {
        for seed in 0..200 {
            let (steps, gap, vocab, n) = (8, 4, 8, 3);
            let ep = gen_delayed_recall(steps, gap, vocab, n, seed).unwrap();
            let t0 = ep.meta.key_step.unwrap();
            assert_eq!(t0 + gap, steps - 1);
            assert!(ep.steps[t0].contains(&key_symbol(vocab, ep.target)));
            let keys: usize = ep.steps.iter().flatten().filter(|&&s| (vocab..2 * vocab).contains(&s)).count();
            assert_eq!(keys, 1);
            // no leakage into the query step
            assert!(ep.steps[steps - 1].iter().all(|&s| s == query(vocab)));
            assert!(ep.steps.iter().flatten().all(|&s| s < input_vocab(vocab)));
        }
    }

    #[test]
    fn delayed_recall_gap_zero_shows_key() {
        let ep = gen_delayed_recall(3, 0, 4, 2, 7).unwrap();
        assert!(ep.steps[2].contains(&key_symbol(4, ep.target)));
        assert!(gen_delayed_recall(3, 3, 4, 2, 7).is_err());
    }

    #[test]
    fn assoc_recall_layout() {
        for seed in 0..200 {
            let ep = gen_assoc_recall(3, 6, seed).unwrap();
            let mut keys: Vec<usize> = ep.steps[..3].iter().map(|s| s[0]).collect();
            keys.sort();
            keys.dedup();
            assert_eq!(keys.len(), 3);
            let q = ep.steps[3][1];
            let pair = ep.steps[..3].iter().find(|s| s[0] == q).unwrap();
            assert_eq!(pair[1], ep.target);
            assert_eq!(ep.steps[3][0], query(6));
        }
        // one pair: the key's value must be recalled after one step
        let ep = gen_assoc_recall(1, 4, 0).unwrap();
        assert_eq!(ep.len(), 2);
        assert_eq!(ep.steps[1][1], ep.steps[0][0]);
        assert!(gen_assoc_recall(5, 4, 0).is_err());
    }

    #[test]
    fn assoc_value_balance() {
        let vocab = 4;
        let mut counts = [0usize; 4];
        let total = 10_000;
        for seed in 0..total {
            counts[gen_assoc_recall(3, vocab, seed).unwrap().target] += 1;
        }
        for c in counts {
            assert!((c as f64 / total as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn generators_are_pure() {
        let t = TaskConfig::DelayedRecall {
            steps: 6,
            gap: 2,
            vocab: 5,
            n: 2,
        };
        assert_eq!(generate(&t, 42).unwrap(), generate(&t, 42).unwrap());
        assert_ne!(corpus(&t, 1, TRAIN_STREAM, 8).unwrap(), corpus(&t, 1, EVAL_STREAM, 8).unwrap());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let targets: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
        let acc = accuracy(&vec![0; targets.len()], &targets).unwrap();
        assert!((acc - 0.5).abs() < 0.02);
    }

    #[test]
    fn collate_supervision() {
        let eps: Vec<Episode> = (0..3).map(|s| gen_copy(4, 2, 3, true, s).unwrap()).collect();
        let b = collate(&eps, Supervision::LastStep).unwrap();
        assert_eq!(b.steps[0].len(), 6);
        assert_eq!(&b.steps[1][2..4], &eps[1].steps[1][..]);
        assert!(b.targets[2].iter().all(Option::is_none));
        assert_eq!(b.targets[3], eps.iter().map(|e| Some(e.target)).collect::<Vec<_>>());
        let b = collate(&eps, Supervision::AllSteps).unwrap();
        assert_eq!(b.targets[2][0], eps[0].targets[2]);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let eps = corpus(&TaskConfig::AssocRecall { pairs: 2, vocab: 4 }, 3, 0, 5).unwrap();
        write_jsonl(&path, &eps).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), eps);
    }
}
