//! FLOP convention for primitives.
//!
//! A multiply-accumulate is 2 FLOPs; `exp`, `tanh` and division count as 1.
//! Data movement (concat, slice, transpose, embedding lookup) is free.
//! The runtime counter in [`crate::autograd::Tape`] and the closed-form
//! model in [`crate::flops`] both price primitives with these constants.

/// `max`, subtract, `exp`, accumulate, divide.
pub const SOFTMAX_PER_ELEM: u64 = 5;
/// Mean, centre, square-accumulate (2), scale by 1/σ, affine (2).
pub const LAYER_NORM_PER_ELEM: u64 = 7;
/// Tanh approximation: cube (2), scale, add, scale, tanh, add, mul, half.
pub const GELU_PER_ELEM: u64 = 9;
pub const RELU_PER_ELEM: u64 = 1;
/// Negate-exp, add one, reciprocal.
pub const SIGMOID_PER_ELEM: u64 = 3;
pub const TANH_PER_ELEM: u64 = 1;
/// Elementwise add, sub, mul and scale.
pub const ELEMENTWISE: u64 = 1;
/// `a * x + b`.
pub const SCALE_SHIFT_PER_ELEM: u64 = 2;

#[inline]
pub fn matmul(batch: usize, p: usize, q: usize, s: usize) -> u64 {
    2 * (batch * p * q * s) as u64
}

/// Mean over `p` tokens of width `d`: `p*d` accumulates plus `d` divides.
#[inline]
pub fn token_mean(p: usize, d: usize) -> u64 {
    (p * d + d) as u64
}
