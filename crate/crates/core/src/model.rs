//! The recurrent cell: `Z = Read(M, I)`, `O = Process(Z)`,
//! `M' = Write(M, O, I)`, `Y = Output(O)`, plus two baseline cells (an LSTM
//! over mean-pooled inputs and a recurrent transformer with state tokens).
//!
//! Every primitive a step records is tagged with one of the stage labels
//! `read`, `process`, `write` or `head`, so runtime FLOP counts can be split
//! the same way as the static analyzer's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{Arch, SummarizerVariant, TtmConfig, WriteVariant};
use crate::error::{Error, Result};
use crate::memory::{self, EraseAdd};
use crate::params::{normal, xavier, ParamStore};
use crate::processor::{Linear, OutputHead, Processor};
use crate::summarizer::{PositionalTable, Summarizer};
use crate::tensor::{Real, Tensor};

pub const STAGES: [&str; 4] = ["read", "process", "write", "head"];

/// Recurrent state between steps, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelState<T: Real> {
    /// `[B, m, d]` (`[B, ≤m, d]` for the concat write).
    Memory(Tensor<T>),
    /// `[B, d]` each.
    Lstm { h: Tensor<T>, c: Tensor<T> },
    /// `[B, s, d]` recurrent-transformer state tokens.
    Tokens(Tensor<T>),
}

impl<T: Real> ModelState<T> {
    pub fn batch(&self) -> usize {
        match self {
            ModelState::Memory(t) | ModelState::Tokens(t) | ModelState::Lstm { h: t, .. } => t.shape()[0],
        }
    }
}

/// Recurrent state recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StateVars {
    Memory(Var),
    Lstm { h: Var, c: Var },
    Tokens(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B, c]`.
    pub logits: Var,
    pub read_weights: Option<Var>,
    pub write_weights: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
enum WriteOp {
    Summary { summarizer: Summarizer, pos: PositionalTable },
    Concat,
    EraseAdd(EraseAdd),
    NoMemory { summarizer: Summarizer, pos: PositionalTable },
}

#[derive(Clone, Debug, PartialEq)]
enum Cell {
    Ttm {
        read: Summarizer,
        read_pos: PositionalTable,
        processor: Processor,
        write: WriteOp,
        head: OutputHead,
    },
    Lstm {
        head: Linear,
    },
    RecurrentTransformer {
        pos: PositionalTable,
        processor: Processor,
        head: OutputHead,
    },
}

const EMBED: &str = "embed";
const MEMORY_INIT: &str = "memory.init";
const RT_INIT: &str = "rt.init";
const LSTM_WX: &str = "lstm.wx";
const LSTM_WH: &str = "lstm.wh";
const LSTM_B: &str = "lstm.b";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TtmConfig,
    cell: Cell,
}

impl Model {
    pub fn new(config: TtmConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let processor = || {
            Processor::new(
                "processor",
                c.processor.kind,
                c.processor.depth,
                c.d,
                c.processor.hidden,
                c.processor.heads,
                c.processor_tokens(),
                c.token_hidden(),
            )
        };
        let cell = match c.arch {
            Arch::Ttm => {
                let h = c.summarizer_hidden();
                let write_summary = || {
                    (
                        Summarizer::new("write.summarizer", c.summarizer, c.m, c.d, h),
                        PositionalTable::new("write.pos", c.m + c.r + c.n, c.d),
                    )
                };
                let write = match c.write {
                    WriteVariant::Ttm => {
                        let (summarizer, pos) = write_summary();
                        WriteOp::Summary { summarizer, pos }
                    }
                    WriteVariant::NoMemory => {
                        let (summarizer, pos) = write_summary();
                        WriteOp::NoMemory { summarizer, pos }
                    }
                    WriteVariant::Concat => WriteOp::Concat,
                    WriteVariant::EraseAdd => WriteOp::EraseAdd(EraseAdd::new("write.erase_add", c.d)),
                };
                Cell::Ttm {
                    read: Summarizer::new("read.summarizer", c.summarizer, c.r, c.d, h),
                    read_pos: PositionalTable::new("read.pos", c.m + c.n, c.d),
                    processor: processor()?,
                    write,
                    head: OutputHead::new("head", c.d, c.classes, c.pooling),
                }
            }
            Arch::Lstm => Cell::Lstm {
                head: Linear::new("head", c.d, c.classes),
            },
            Arch::RecurrentTransformer => Cell::RecurrentTransformer {
                pos: PositionalTable::new("rt.pos", c.state_tokens + c.n, c.d),
                processor: processor()?,
                head: OutputHead::new("head", c.d, c.classes, c.pooling),
            },
        };
        Ok(Self { config, cell })
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamStore<T>> {
        let c = &self.config;
        let mut store = ParamStore::new();
        store.insert(EMBED, normal(rng, &[c.input_vocab, c.d], 1.0))?;
        match &self.cell {
            Cell::Ttm {
                read,
                read_pos,
                processor,
                write,
                head,
            } => {
                read.init_params(&mut store, rng)?;
                read_pos.init_params(&mut store, rng)?;
                processor.init_params(&mut store, rng)?;
                match write {
                    WriteOp::Summary { summarizer, pos } | WriteOp::NoMemory { summarizer, pos } => {
                        summarizer.init_params(&mut store, rng)?;
                        pos.init_params(&mut store, rng)?;
                    }
                    WriteOp::EraseAdd(ea) => ea.init_params(&mut store, rng)?,
                    WriteOp::Concat => {}
                }
                head.init_params(&mut store, rng)?;
                if c.learned_init && c.write != WriteVariant::Concat {
                    store.insert(MEMORY_INIT, normal(rng, &[c.m, c.d], 0.1))?;
                }
            }
            Cell::Lstm { head } => {
                store.insert(LSTM_WX, xavier(rng, c.d, 4 * c.d))?;
                store.insert(LSTM_WH, xavier(rng, c.d, 4 * c.d))?;
                let mut b = Tensor::zeros(&[4 * c.d]);
                b.data_mut()[c.d..2 * c.d].fill(T::one());
                store.insert(LSTM_B, b)?;
                head.init_params(&mut store, rng)?;
            }
            Cell::RecurrentTransformer { pos, processor, head } => {
                pos.init_params(&mut store, rng)?;
                processor.init_params(&mut store, rng)?;
                head.init_params(&mut store, rng)?;
                if c.learned_init {
                    store.insert(RT_INIT, normal(rng, &[c.state_tokens, c.d], 0.1))?;
                }
            }
        }
        Ok(store)
    }

    /// Parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.init_params(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Symbol ids (`batch × n`, episode-major) to input tokens `[B, n, d]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[usize], batch: usize) -> Result<Var> {
        let table = tape.param(EMBED)?;
        let n = if batch == 0 { 0 } else { ids.len() / batch };
        if n * batch != ids.len() || n != self.config.n {
            return Err(Error::shape("embed", &[ids.len()], &[batch, self.config.n]));
        }
        tape.embedding(table, ids, &[batch, n])
    }

    /// The zero state. Learned initial state, when enabled, is applied by
    /// [`Model::initial_vars`].
    pub fn initial_state<T: Real>(&self, batch: usize) -> ModelState<T> {
        let c = &self.config;
        match (&self.cell, c.write) {
            (Cell::Ttm { .. }, WriteVariant::Concat) => ModelState::Memory(Tensor::zeros(&[batch, 0, c.d])),
            (Cell::Ttm { .. }, _) => ModelState::Memory(Tensor::zeros(&[batch, c.m, c.d])),
            (Cell::Lstm { .. }, _) => ModelState::Lstm {
                h: Tensor::zeros(&[batch, c.d]),
                c: Tensor::zeros(&[batch, c.d]),
            },
            (Cell::RecurrentTransformer { .. }, _) => ModelState::Tokens(Tensor::zeros(&[batch, c.state_tokens, c.d])),
        }
    }

    /// Initial state on `tape`, including the learned offset if configured.
    pub fn initial_vars<T: Real>(&self, tape: &mut Tape<'_, T>, batch: usize) -> Result<StateVars> {
        let vars = self.state_vars(tape, &self.initial_state(batch));
        let init = match self.cell {
            Cell::Ttm { .. } if self.config.learned_init && self.config.write != WriteVariant::Concat => MEMORY_INIT,
            Cell::RecurrentTransformer { .. } if self.config.learned_init => RT_INIT,
            _ => return Ok(vars),
        };
        let offset = tape.param(init)?;
        Ok(match vars {
            StateVars::Memory(v) => StateVars::Memory(tape.add(v, offset)?),
            StateVars::Tokens(v) => StateVars::Tokens(tape.add(v, offset)?),
            other => other,
        })
    }

    /// Records `state` as constants; no gradient flows back past them.
    pub fn state_vars<T: Real>(&self, tape: &mut Tape<'_, T>, state: &ModelState<T>) -> StateVars {
        match state {
            ModelState::Memory(m) => StateVars::Memory(tape.constant(m.clone())),
            ModelState::Tokens(m) => StateVars::Tokens(tape.constant(m.clone())),
            ModelState::Lstm { h, c } => StateVars::Lstm {
                h: tape.constant(h.clone()),
                c: tape.constant(c.clone()),
            },
        }
    }

    /// Copies state values off the tape.
    pub fn snapshot<T: Real>(&self, tape: &Tape<'_, T>, vars: StateVars) -> ModelState<T> {
        match vars {
            StateVars::Memory(v) => ModelState::Memory(tape.value(v).clone()),
            StateVars::Tokens(v) => ModelState::Tokens(tape.value(v).clone()),
            StateVars::Lstm { h, c } => ModelState::Lstm {
                h: tape.value(h).clone(),
                c: tape.value(c).clone(),
            },
        }
    }

    /// One recurrent step on input tokens `[B, n, d]`.
    pub fn step<T: Real>(&self, tape: &mut Tape<'_, T>, state: StateVars, input: Var) -> Result<(StepOutput, StateVars)> {
        let c = &self.config;
        let is = tape.shape(input).to_vec();
        if is.len() != 3 || is[1] != c.n || is[2] != c.d {
            return Err(Error::shape("step", &is, &[is.first().copied().unwrap_or(0), c.n, c.d]));
        }
        let batch = is[0];
        let out = match (&self.cell, state) {
            (
                Cell::Ttm {
                    read,
                    read_pos,
                    processor,
                    write,
                    head,
                },
                StateVars::Memory(mem),
            ) => {
                self.check_state(tape, mem, batch)?;
                tape.set_stage(Some("read"));
                let z = memory::read(tape, mem, input, read, read_pos)?;
                tape.set_stage(Some("process"));
                let o = processor.process(tape, z.tokens)?;
                tape.set_stage(Some("write"));
                let (next, write_weights) = match write {
                    WriteOp::Summary { summarizer, pos } => {
                        let s = memory::write(tape, mem, o, input, summarizer, pos)?;
                        (s.tokens, s.weights)
                    }
                    WriteOp::NoMemory { summarizer, pos } => {
                        let s = memory::write(tape, mem, o, input, summarizer, pos)?;
                        (memory::zero_memory(tape, s.tokens), s.weights)
                    }
                    WriteOp::Concat => (memory::write_concat(tape, mem, input, c.m)?, None),
                    WriteOp::EraseAdd(ea) => (ea.write(tape, mem, o)?, None),
                };
                tape.set_stage(Some("head"));
                let logits = head.output(tape, o)?;
                (
                    StepOutput {
                        logits,
                        read_weights: z.weights,
                        write_weights,
                    },
                    StateVars::Memory(next),
                )
            }
            (Cell::Lstm { head }, StateVars::Lstm { h, c: cell }) => {
                self.check_state(tape, h, batch)?;
                tape.set_stage(Some("process"));
                let x = tape.token_mean(input)?;
                let wx = tape.param(LSTM_WX)?;
                let wh = tape.param(LSTM_WH)?;
                let b = tape.param(LSTM_B)?;
                let gx = tape.matmul(x, wx)?;
                let gh = tape.matmul(h, wh)?;
                let g = tape.add(gx, gh)?;
                let g = tape.add(g, b)?;
                let d = c.d;
                let gate = |tape: &mut Tape<'_, T>, k: usize| tape.slice(g, 1, k * d, d);
                let (i, f, u, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
                let i = tape.sigmoid(i);
                let f = tape.sigmoid(f);
                let u = tape.tanh(u);
                let o = tape.sigmoid(o);
                let keep = tape.mul(f, cell)?;
                let fresh = tape.mul(i, u)?;
                let c_next = tape.add(keep, fresh)?;
                let squashed = tape.tanh(c_next);
                let h_next = tape.mul(o, squashed)?;
                tape.set_stage(Some("head"));
                let logits = head.forward(tape, h_next)?;
                (
                    StepOutput {
                        logits,
                        read_weights: None,
                        write_weights: None,
                    },
                    StateVars::Lstm { h: h_next, c: c_next },
                )
            }
            (Cell::RecurrentTransformer { pos, processor, head }, StateVars::Tokens(st)) => {
                self.check_state(tape, st, batch)?;
                let s = c.state_tokens;
                tape.set_stage(Some("read"));
                let x = tape.concat(&[st, input], 1)?;
                let x = pos.add_positions(tape, x)?;
                tape.set_stage(Some("process"));
                let o = processor.process(tape, x)?;
                let next = tape.slice(o, 1, 0, s)?;
                let rest = tape.slice(o, 1, s, c.n)?;
                tape.set_stage(Some("head"));
                let logits = head.output(tape, rest)?;
                (
                    StepOutput {
                        logits,
                        read_weights: None,
                        write_weights: None,
                    },
                    StateVars::Tokens(next),
                )
            }
            (_, state) => {
                return Err(Error::Usage(format!(
                    "state {state:?} does not match a {:?} model",
                    c.arch
                )))
            }
        };
        tape.set_stage(None);
        Ok(out)
    }

    fn check_state<T: Real>(&self, tape: &Tape<'_, T>, v: Var, batch: usize) -> Result<()> {
        let s = tape.shape(v);
        let d = self.config.d;
        let ok = s.first() == Some(&batch)
            && s.last() == Some(&d)
            && match (&self.cell, s.len()) {
                (Cell::Lstm { .. }, 2) => true,
                (Cell::Ttm { .. }, 3) if self.config.write == WriteVariant::Concat => s[1] <= self.config.m,
                (Cell::Ttm { .. }, 3) => s[1] == self.config.m,
                (Cell::RecurrentTransformer { .. }, 3) => s[1] == self.config.state_tokens,
                _ => false,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("state", s, &[batch, self.config.m, d]))
        }
    }

    /// Steps through `inputs` in order.
    pub fn unroll<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        state: StateVars,
        inputs: &[Var],
    ) -> Result<(Vec<StepOutput>, StateVars)> {
        if inputs.is_empty() {
            return Err(Error::Usage("unroll needs at least one step".into()));
        }
        let mut state = state;
        let mut outs = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let (o, s) = self.step(tape, state, i)?;
            outs.push(o);
            state = s;
        }
        Ok((outs, state))
    }

    /// Whether the read/write summarizers have importance weights.
    pub fn has_weights(&self) -> bool {
        self.config.arch == Arch::Ttm && self.config.summarizer != SummarizerVariant::Pooling
    }
}

/// Index of the largest logit in each row of a `[B, c]` tensor.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
