//! Memory read and write operators.
//!
//! Memory is a `[batch,] m × d` token matrix. Reading summarises the
//! concatenation `[M ‖ I]` into `r` tokens; the summarisation write
//! summarises `[M ‖ O ‖ I]` back into `m` tokens, so a memory token survives
//! only by being re-selected. The remaining writes are ablations.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier, ParamStore};
use crate::summarizer::{PositionalTable, Summarizer, Summary};
use crate::tensor::{Real, Tensor};

const TOKEN_AXIS_RANK3: usize = 1;

fn token_axis<T: Real>(tape: &Tape<'_, T>, v: Var) -> usize {
    if tape.shape(v).len() == 3 {
        TOKEN_AXIS_RANK3
    } else {
        0
    }
}

fn check_channels<T: Real>(tape: &Tape<'_, T>, op: &'static str, parts: &[Var]) -> Result<()> {
    let first = tape.shape(parts[0]);
    for &p in &parts[1..] {
        let s = tape.shape(p);
        if s.len() != first.len() || s.last() != first.last() || s[..s.len() - 2] != first[..first.len() - 2] {
            return Err(Error::shape(op, first, s));
        }
    }
    Ok(())
}

/// `Z = S_r(pos([M ‖ I]))`.
pub fn read<T: Real>(
    tape: &mut Tape<'_, T>,
    memory: Var,
    input: Var,
    summarizer: &Summarizer,
    positions: &PositionalTable,
) -> Result<Summary> {
    check_channels(tape, "read", &[memory, input])?;
    let axis = token_axis(tape, memory);
    let p = tape.shape(memory)[axis] + tape.shape(input)[axis];
    if summarizer.k > p {
        log::warn!("reading {} tokens from a pool of {p}", summarizer.k);
    }
    let x = tape.concat(&[memory, input], axis)?;
    let x = positions.add_positions(tape, x)?;
    summarizer.summarize(tape, x)
}

/// `M' = S_m(pos([M ‖ O ‖ I]))`; the summarizer's `k` must equal `m`.
pub fn write<T: Real>(
    tape: &mut Tape<'_, T>,
    memory: Var,
    output: Var,
    input: Var,
    summarizer: &Summarizer,
    positions: &PositionalTable,
) -> Result<Summary> {
    check_channels(tape, "write", &[memory, output, input])?;
    let axis = token_axis(tape, memory);
    let m = tape.shape(memory)[axis];
    if summarizer.k != m {
        return Err(Error::shape("write", tape.shape(memory), &[summarizer.k]));
    }
    let x = tape.concat(&[memory, output, input], axis)?;
    let x = positions.add_positions(tape, x)?;
    summarizer.summarize(tape, x)
}

/// FIFO append of the input tokens, keeping the newest `capacity`.
pub fn write_concat<T: Real>(
    tape: &mut Tape<'_, T>,
    memory: Var,
    input: Var,
    capacity: usize,
) -> Result<Var> {
    check_channels(tape, "write_concat", &[memory, input])?;
    let axis = token_axis(tape, memory);
    let x = tape.concat(&[memory, input], axis)?;
    let len = tape.shape(x)[axis];
    if len > capacity {
        tape.slice(x, axis, len - capacity, capacity)
    } else {
        Ok(x)
    }
}

/// An all-zero memory of the same shape; nothing flows back through it.
pub fn zero_memory<T: Real>(tape: &mut Tape<'_, T>, memory: Var) -> Var {
    let zeros = Tensor::zeros(tape.shape(memory));
    tape.constant(zeros)
}

/// Erase-and-add write driven by the processing unit's output tokens.
///
/// For output token `j`: key `kⱼ = W_k oⱼ`, erase `eⱼ = σ(W_e oⱼ)`, add
/// `aⱼ = W_a oⱼ`, address `wⱼ = softmax(M kⱼᵀ / √d)` over memory slots, then
/// `M ← M ∘ (1 − wⱼ eⱼᵀ) + wⱼ aⱼᵀ`, applied for `j = 1..r` in order.
#[derive(Clone, Debug, PartialEq)]
pub struct EraseAdd {
    pub d: usize,
    prefix: String,
}

impl EraseAdd {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            d,
            prefix: prefix.to_string(),
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for w in ["key", "erase", "add"] {
            store.insert(&format!("{}.{w}", self.prefix), xavier(rng, self.d, self.d))?;
        }
        Ok(())
    }

    pub fn write<T: Real>(&self, tape: &mut Tape<'_, T>, memory: Var, output: Var) -> Result<Var> {
        check_channels(tape, "write_erase_add", &[memory, output])?;
        let axis = token_axis(tape, memory);
        let r = tape.shape(output)[axis];
        let wk = tape.param(&format!("{}.key", self.prefix))?;
        let we = tape.param(&format!("{}.erase", self.prefix))?;
        let wa = tape.param(&format!("{}.add", self.prefix))?;
        let keys = tape.matmul(output, wk)?;
        let erase = tape.matmul(output, we)?;
        let erase = tape.sigmoid(erase);
        let add = tape.matmul(output, wa)?;
        let inv_sqrt_d = T::of(1.0 / (self.d as f64).sqrt());

        let mut mem = memory;
        for j in 0..r {
            let k = tape.slice(keys, axis, j, 1)?;
            let e = tape.slice(erase, axis, j, 1)?;
            let a = tape.slice(add, axis, j, 1)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(mem, kt)?;
            let logits = tape.scale(logits, inv_sqrt_d);
            let logits = tape.transpose(logits)?;
            let w = tape.softmax(logits)?;
            let w = tape.transpose(w)?;
            let we = tape.matmul(w, e)?;
            let keep = tape.scale_shift(we, -T::one(), T::one());
            let kept = tape.mul(mem, keep)?;
            let wa = tape.matmul(w, a)?;
            mem = tape.add(kept, wa)?;
        }
        Ok(mem)
    }
}
