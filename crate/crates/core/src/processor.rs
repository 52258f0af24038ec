//! The processing unit `F: r × d → r × d` and the linear output head.
//!
//! Blocks are pre-norm residual. No positional information is added here;
//! tokens carry position only through the read summarisation.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::{HeadPooling, ProcessorKind};
use crate::error::{Error, Result};
use crate::params::{xavier, ParamStore};
use crate::tensor::{Real, Tensor};

/// Affine map on the last axis, `x W + b`, or `x W` without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
    prefix: String,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            din,
            dout,
            bias: true,
            prefix: prefix.into(),
        }
    }

    pub fn without_bias(prefix: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            bias: false,
            ..Self::new(prefix, din, dout)
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        store.insert(&format!("{}.w", self.prefix), xavier(rng, self.din, self.dout))?;
        if self.bias {
            store.insert(&format!("{}.b", self.prefix), Tensor::zeros(&[self.dout]))?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.w", self.prefix))?;
        let y = tape.matmul(x, w)?;
        if !self.bias {
            return Ok(y);
        }
        let b = tape.param(&format!("{}.b", self.prefix))?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub d: usize,
    prefix: String,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, d: usize) -> Self {
        Self {
            d,
            prefix: prefix.into(),
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(&format!("{}.gain", self.prefix), Tensor::ones(&[self.d]))?;
        store.insert(&format!("{}.bias", self.prefix), Tensor::zeros(&[self.d]))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(&format!("{}.gain", self.prefix))?;
        let b = tape.param(&format!("{}.bias", self.prefix))?;
        tape.layer_norm(x, g, b)
    }
}

/// `fc2(gelu(fc1(x)))`
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{prefix}.fc1"), din, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, dout),
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init_params(store, rng)?;
        self.fc2.init_params(store, rng)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Multi-head self-attention over the token axis, scaled by `1/√d_head`.
/// Keys have no bias: it adds a per-query constant to the scores, which the
/// softmax removes.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub d: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Self {
        Self {
            heads,
            d,
            q: Linear::new(format!("{prefix}.q"), d, d),
            k: Linear::without_bias(format!("{prefix}.k"), d, d),
            v: Linear::new(format!("{prefix}.v"), d, d),
            o: Linear::new(format!("{prefix}.o"), d, d),
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init_params(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let ch = tape.shape(x).len() - 1;
        let dh = self.d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, ch, h * dh, dh)?,
                    tape.slice(k, ch, h * dh, dh)?,
                    tape.slice(v, ch, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax(logits)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, ch)?
        };
        self.o.forward(tape, cat)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Transformer {
        ln1: LayerNorm,
        attn: Attention,
        ln2: LayerNorm,
        mlp: Mlp,
    },
    Mixer {
        ln1: LayerNorm,
        token_mlp: Mlp,
        ln2: LayerNorm,
        channel_mlp: Mlp,
    },
    Mlp {
        ln: LayerNorm,
        mlp: Mlp,
    },
}

/// A stack of `depth` blocks of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Processor {
    pub kind: ProcessorKind,
    pub d: usize,
    /// Token count fixed at build time (the mixer's token-MLP width).
    pub tokens: usize,
    blocks: Vec<Block>,
}

impl Processor {
    pub fn new(
        prefix: &str,
        kind: ProcessorKind,
        depth: usize,
        d: usize,
        hidden: usize,
        heads: usize,
        tokens: usize,
        token_hidden: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("processor.depth", "must be positive"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config("processor.heads", format!("d={d} not divisible by heads={heads}")));
        }
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                match kind {
                    ProcessorKind::Transformer => Block::Transformer {
                        ln1: LayerNorm::new(format!("{p}.ln1"), d),
                        attn: Attention::new(&format!("{p}.attn"), d, heads),
                        ln2: LayerNorm::new(format!("{p}.ln2"), d),
                        mlp: Mlp::new(&format!("{p}.mlp"), d, hidden, d),
                    },
                    ProcessorKind::Mixer => Block::Mixer {
                        ln1: LayerNorm::new(format!("{p}.ln1"), d),
                        token_mlp: Mlp::new(&format!("{p}.token"), tokens, token_hidden, tokens),
                        ln2: LayerNorm::new(format!("{p}.ln2"), d),
                        channel_mlp: Mlp::new(&format!("{p}.channel"), d, hidden, d),
                    },
                    ProcessorKind::Mlp => Block::Mlp {
                        ln: LayerNorm::new(format!("{p}.ln"), d),
                        mlp: Mlp::new(&format!("{p}.mlp"), d, hidden, d),
                    },
                }
            })
            .collect();
        Ok(Self {
            kind,
            d,
            tokens,
            blocks,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for b in &self.blocks {
            match b {
                Block::Transformer { ln1, attn, ln2, mlp } => {
                    ln1.init_params(store)?;
                    attn.init_params(store, rng)?;
                    ln2.init_params(store)?;
                    mlp.init_params(store, rng)?;
                }
                Block::Mixer {
                    ln1,
                    token_mlp,
                    ln2,
                    channel_mlp,
                } => {
                    ln1.init_params(store)?;
                    token_mlp.init_params(store, rng)?;
                    ln2.init_params(store)?;
                    channel_mlp.init_params(store, rng)?;
                }
                Block::Mlp { ln, mlp } => {
                    ln.init_params(store)?;
                    mlp.init_params(store, rng)?;
                }
            }
        }
        Ok(())
    }

    /// `[batch,] tokens × d → [batch,] tokens × d`.
    pub fn process<T: Real>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d {
            return Err(Error::shape("process", &shape, &[self.tokens, self.d]));
        }
        let tokens = shape[shape.len() - 2];
        if self.kind == ProcessorKind::Mixer && tokens != self.tokens {
            return Err(Error::config(
                "r",
                format!("mixer built for {} tokens, got {tokens}", self.tokens),
            ));
        }
        let mut x = z;
        for b in &self.blocks {
            x = match b {
                Block::Transformer { ln1, attn, ln2, mlp } => {
                    let h = ln1.forward(tape, x)?;
                    let h = attn.forward(tape, h)?;
                    let x = tape.add(x, h)?;
                    let h = ln2.forward(tape, x)?;
                    let h = mlp.forward(tape, h)?;
                    tape.add(x, h)?
                }
                Block::Mixer {
                    ln1,
                    token_mlp,
                    ln2,
                    channel_mlp,
                } => {
                    let h = ln1.forward(tape, x)?;
                    let h = tape.transpose(h)?;
                    let h = token_mlp.forward(tape, h)?;
                    let h = tape.transpose(h)?;
                    let x = tape.add(x, h)?;
                    let h = ln2.forward(tape, x)?;
                    let h = channel_mlp.forward(tape, h)?;
                    tape.add(x, h)?
                }
                Block::Mlp { ln, mlp } => {
                    let h = ln.forward(tape, x)?;
                    let h = mlp.forward(tape, h)?;
                    tape.add(x, h)?
                }
            };
        }
        Ok(x)
    }
}

/// Pools the output tokens and maps them to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    pub pooling: HeadPooling,
    pub linear: Linear,
}

impl OutputHead {
    pub fn new(prefix: &str, d: usize, classes: usize, pooling: HeadPooling) -> Self {
        Self {
            pooling,
            linear: Linear::new(prefix, d, classes),
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.linear.init_params(store, rng)
    }

    /// `[batch,] r × d → [batch,] c`.
    pub fn output<T: Real>(&self, tape: &mut Tape<'_, T>, o: Var) -> Result<Var> {
        let shape = tape.shape(o).to_vec();
        let rank = shape.len();
        if rank < 2 {
            return Err(Error::shape("output", &shape, &[self.linear.din]));
        }
        let mut lead: Vec<usize> = shape[..rank - 2].to_vec();
        let pooled = match self.pooling {
            HeadPooling::Mean => tape.token_mean(o)?,
            HeadPooling::First => {
                let first = tape.slice(o, rank - 2, 0, 1)?;
                let mut s = lead.clone();
                s.push(shape[rank - 1]);
                tape.reshape(first, &s)?
            }
        };
        let unbatched = lead.is_empty();
        let pooled = if unbatched {
            tape.reshape(pooled, &[1, shape[rank - 1]])?
        } else {
            pooled
        };
        let logits = self.linear.forward(tape, pooled)?;
        if unbatched {
            lead.push(self.linear.dout);
            tape.reshape(logits, &lead)
        } else {
            Ok(logits)
        }
    }
}
