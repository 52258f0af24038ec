//! Classification losses over per-step logits.

use crate::autograd::{Tape, Var};
use crate::config::LossKind;
use crate::error::{Error, Result};
use crate::model::StepOutput;
use crate::tensor::Real;

/// Mean loss over rows with a target. Smoothing mixes the one-hot target
/// with the uniform distribution (softmax) or with 0.5 (sigmoid) at rate `ε`.
pub fn loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    targets: &[Option<usize>],
    kind: LossKind,
    smoothing: f64,
) -> Result<Var> {
    match kind {
        LossKind::SoftmaxCe => tape.softmax_cross_entropy(logits, targets, smoothing),
        LossKind::SigmoidCe => tape.sigmoid_cross_entropy(logits, targets, smoothing),
    }
}

/// Loss over every supervised row of every step, or `None` when no step in
/// `outputs` carries a target. `targets[t][b]` pairs with `outputs[t]`.
pub fn sequence_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    outputs: &[StepOutput],
    targets: &[Vec<Option<usize>>],
    kind: LossKind,
    smoothing: f64,
) -> Result<Option<Var>> {
    if outputs.len() != targets.len() {
        return Err(Error::shape("sequence_loss", &[outputs.len()], &[targets.len()]));
    }
    let mut logits = Vec::new();
    let mut flat = Vec::new();
    for (o, t) in outputs.iter().zip(targets) {
        if t.iter().any(Option::is_some) {
            logits.push(o.logits);
            flat.extend_from_slice(t);
        }
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let all = if logits.len() == 1 {
        logits[0]
    } else {
        tape.concat(&logits, 0)?
    };
    loss(tape, all, &flat, kind, smoothing).map(Some)
}
