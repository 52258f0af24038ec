//! Token summarisation `S_k`: maps `p` tokens to `k` tokens by learned
//! convex combinations, plus the learnable positional tables that give the
//! memory interface location addressing.
//!
//! Weight variants compute an importance matrix `W` (`k × p`, each row a
//! distribution over the input tokens) and return `W · V`:
//!
//! * `mlp`: a per-token two-layer GELU MLP `d → h → k`; its `p × k` output is
//!   transposed and softmaxed over the token axis. The second layer has no
//!   bias: a per-row constant cancels in that softmax.
//! * `latent_query`: `softmax(Q Vᵀ / √d)` with a learned `k × d` query.
//!
//! `pooling` has no parameters: the `p` tokens are split into `k` contiguous
//! groups whose sizes differ by at most one, and each group is mean-pooled.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::SummarizerVariant;
use crate::error::{Error, Result};
use crate::params::{normal, xavier, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Summarizer {
    pub variant: SummarizerVariant,
    /// Output token count.
    pub k: usize,
    pub d: usize,
    /// MLP hidden width.
    pub hidden: usize,
    prefix: String,
}

/// Output of [`Summarizer::summarize`].
#[derive(Clone, Copy, Debug)]
pub struct Summary {
    pub tokens: Var,
    /// Importance weights (`[batch,] k × p`); absent for pooling.
    pub weights: Option<Var>,
}

impl Summarizer {
    pub fn new(prefix: &str, variant: SummarizerVariant, k: usize, d: usize, hidden: usize) -> Self {
        Self {
            variant,
            k,
            d,
            hidden,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        match self.variant {
            SummarizerVariant::Mlp => {
                store.insert(&self.name("w1"), xavier(rng, self.d, self.hidden))?;
                store.insert(&self.name("b1"), Tensor::zeros(&[self.hidden]))?;
                store.insert(&self.name("w2"), xavier(rng, self.hidden, self.k))?;
            }
            SummarizerVariant::LatentQuery => {
                let std = 1.0 / (self.d as f64).sqrt();
                store.insert(&self.name("query"), normal(rng, &[self.k, self.d], std))?;
            }
            SummarizerVariant::Pooling => {}
        }
        Ok(())
    }

    /// Importance weights `W` for `v` (`[batch,] p × d`), shaped `[batch,] k × p`.
    pub fn importance_weights<T: Real>(&self, tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
        let p = self.check_input(tape, v)?;
        if p == 0 {
            return Err(Error::shape("importance_weights", tape.shape(v), &[self.k]));
        }
        let logits = match self.variant {
            SummarizerVariant::Mlp => {
                let w1 = tape.param(&self.name("w1"))?;
                let b1 = tape.param(&self.name("b1"))?;
                let w2 = tape.param(&self.name("w2"))?;
                let h = tape.matmul(v, w1)?;
                let h = tape.add(h, b1)?;
                let h = tape.gelu(h);
                let o = tape.matmul(h, w2)?;
                tape.transpose(o)?
            }
            SummarizerVariant::LatentQuery => {
                let q = tape.param(&self.name("query"))?;
                let vt = tape.transpose(v)?;
                let s = tape.matmul(q, vt)?;
                tape.scale(s, T::of(1.0 / (self.d as f64).sqrt()))
            }
            SummarizerVariant::Pooling => {
                return Err(Error::Unsupported(
                    "pooling summarizer has no importance weights".into(),
                ))
            }
        };
        tape.softmax(logits)
    }

    /// `Z = S_k(V)`, shaped `[batch,] k × d`.
    pub fn summarize<T: Real>(&self, tape: &mut Tape<'_, T>, v: Var) -> Result<Summary> {
        let p = self.check_input(tape, v)?;
        match self.variant {
            SummarizerVariant::Pooling => {
                let groups = pooling_groups(p, self.k)?;
                let tokens = tape.group_mean(v, &groups)?;
                Ok(Summary {
                    tokens,
                    weights: None,
                })
            }
            _ => {
                let w = self.importance_weights(tape, v)?;
                let tokens = tape.matmul(w, v)?;
                Ok(Summary {
                    tokens,
                    weights: Some(w),
                })
            }
        }
    }

    fn check_input<T: Real>(&self, tape: &Tape<'_, T>, v: Var) -> Result<usize> {
        let s = tape.shape(v);
        if !(2..=3).contains(&s.len()) || s[s.len() - 1] != self.d {
            return Err(Error::shape("summarize", s, &[self.d]));
        }
        Ok(s[s.len() - 2])
    }
}

/// Contiguous `(start, len)` groups covering `0..p`, sizes differing by ≤ 1.
pub fn pooling_groups(p: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k > p {
        return Err(Error::config(
            "summarizer.k",
            format!("pooling {p} tokens into {k} groups leaves a group empty"),
        ));
    }
    let (base, extra) = (p / k, p % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let g = (start, len);
            start += len;
            g
        })
        .collect())
}

/// Learnable `len × d` table added to the first `p` rows of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    pub name: String,
    pub len: usize,
    pub d: usize,
}

impl PositionalTable {
    pub fn new(name: &str, len: usize, d: usize) -> Self {
        Self {
            name: name.to_string(),
            len,
            d,
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        store.insert(&self.name, normal(rng, &[self.len, self.d], 0.1))
    }

    /// `V + E[0..p]`.
    pub fn add_positions<T: Real>(&self, tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
        let s = tape.shape(v).to_vec();
        if s.len() < 2 || s[s.len() - 1] != self.d {
            return Err(Error::shape("add_positions", &s, &[self.len, self.d]));
        }
        let p = s[s.len() - 2];
        if p > self.len {
            return Err(Error::Capacity(format!(
                "positional table `{}` holds {} rows, input has {p}",
                self.name, self.len
            )));
        }
        let mut table = tape.param(&self.name)?;
        if p < self.len {
            table = tape.slice(table, 0, 0, p)?;
        }
        tape.add(v, table)
    }
}
