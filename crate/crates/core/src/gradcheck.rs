//! Central finite-difference check of tape gradients (64-bit only).

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    /// Set when probing produced a non-finite loss.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err <= self.tol
    }
}

/// Denominator floor of [`relative_error`]. A tiny model's O(1) loss
/// carries a few `1e-15` of accumulated round-off, which central differences
/// at `eps = 1e-5` turn into up to ~`2e-10` of gradient noise. Gradients
/// smaller than `noise / tol` cannot be compared relatively at `tol = 1e-4`;
/// under the floor the check is absolute at `tol · floor = 1e-9`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a - f| / max(|a|, |f|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// for every scalar of every parameter in `store`. `store` is perturbed in
/// place and restored before returning.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    eps: f64,
    tol: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic: BTreeMap<String, Tensor<f64>> = {
        let mut tape = Tape::with_params(store);
        let loss = loss_fn(&mut tape)?;
        let grads = tape.backward(loss)?;
        store
            .iter()
            .map(|(name, value)| {
                let g = tape
                    .param_vars()
                    .get(name)
                    .and_then(|&v| grads.wrt(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = loss_fn(&mut tape)?;
        tape.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        tol,
        failure: None,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name).map_or(0, Tensor::numel);
        for i in 0..n {
            let orig = store.get(&name).expect("listed").data()[i];
            set(store, &name, i, orig + eps);
            let plus = eval(store)?;
            set(store, &name, i, orig - eps);
            let minus = eval(store)?;
            set(store, &name, i, orig);
            if !plus.is_finite() || !minus.is_finite() {
                report.failure = Some(format!("non-finite loss probing {name}[{i}]"));
                report.worst_param = name;
                report.worst_index = i;
                return Ok(report);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[&name].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Adds `N(0, std²)` noise to every parameter. Fresh initialisations put
/// biases and norm shifts at zero, where some gradients are too small for a
/// relative comparison; a jittered point avoids that symmetry.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed");
        let noise = normal::<f64>(&mut rng, t.shape(), std);
        t.add_assign(&noise);
    }
}

fn set(store: &mut ParamStore<f64>, name: &str, i: usize, v: f64) {
    store.get_mut(name).expect("listed").data_mut()[i] = v;
}
