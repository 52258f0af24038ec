//! Closed-form per-step operation counts.
//!
//! Counts follow [`crate::cost`] exactly, so for any model the static total
//! equals what the tape's runtime counter records for the same step. The
//! counts are per example; every term is linear in batch size.
//!
//! Bounded-state cells (TTM, LSTM, recurrent transformer) cost the same at
//! every step once their state is full. The concat write grows its FIFO
//! memory for the first `⌈m/n⌉` steps and is constant afterwards. The
//! causal-transformer reference attends over a cache of all previous tokens,
//! so its attention term grows linearly with `t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{Arch, HeadPooling, ProcessorKind, SummarizerVariant, TtmConfig, WriteVariant};
use crate::cost::{self, matmul, token_mean};
use crate::error::{Error, Result};
use crate::model::STAGES;

/// Decoder-only transformer over `n` new tokens per step with a key/value
/// cache of everything seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalCacheConfig {
    pub n: usize,
    pub d: usize,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Descriptor {
    Model(TtmConfig),
    CausalCache(CausalCacheConfig),
}

impl Descriptor {
    /// Parses a model config, or `{"arch": "causal_transformer", ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_str(text)?;
        let arch = v.get("arch").and_then(|a| a.as_str()).map(str::to_string);
        match arch.as_deref() {
            Some("causal_transformer") => {
                v.as_object_mut().expect("object with arch").remove("arch");
                Ok(Descriptor::CausalCache(serde_json::from_value(v)?))
            }
            None | Some("ttm" | "lstm" | "recurrent_transformer") => {
                let cfg: TtmConfig = serde_json::from_value(v)?;
                cfg.validate()?;
                Ok(Descriptor::Model(cfg))
            }
            Some(other) => Err(Error::Unsupported(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn arch_name(&self) -> &'static str {
        match self {
            Descriptor::Model(c) => match c.arch {
                Arch::Ttm => "ttm",
                Arch::Lstm => "lstm",
                Arch::RecurrentTransformer => "recurrent_transformer",
            },
            Descriptor::CausalCache(_) => "causal_transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    /// 1-based step index.
    pub t: u64,
    /// FLOPs per stage (`read`, `process`, `write`, `head`).
    pub stages: BTreeMap<String, u64>,
    pub total: u64,
    pub params: u64,
}

impl CostReport {
    pub fn stage(&self, name: &str) -> u64 {
        self.stages.get(name).copied().unwrap_or(0)
    }
}

pub fn count_flops(desc: &Descriptor, t: u64) -> Result<CostReport> {
    if t == 0 {
        return Err(Error::Usage("step index is 1-based".into()));
    }
    let (stages, params) = match desc {
        Descriptor::Model(c) => {
            c.validate()?;
            let s = match c.arch {
                Arch::Ttm => ttm_stages(c, t),
                Arch::Lstm => lstm_stages(c),
                Arch::RecurrentTransformer => rt_stages(c),
            };
            (s, model_params(c))
        }
        Descriptor::CausalCache(c) => causal_stages(c, t)?,
    };
    let stages: BTreeMap<String, u64> = STAGES.iter().zip(stages).map(|(k, v)| (k.to_string(), v)).collect();
    Ok(CostReport {
        arch: desc.arch_name().to_string(),
        t,
        total: stages.values().sum(),
        stages,
        params,
    })
}

/// CSV with one row per named descriptor.
pub fn compare(descs: &[(String, Descriptor)], t: u64) -> Result<String> {
    let mut out = String::from("name,arch,t,read,process,write,head,total,params\n");
    for (name, d) in descs {
        let r = count_flops(d, t)?;
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{},{}",
            r.arch,
            r.t,
            r.stage("read"),
            r.stage("process"),
            r.stage("write"),
            r.stage("head"),
            r.total,
            r.params
        );
    }
    Ok(out)
}

/// `x W + b` on `rows` tokens.
fn linear(rows: usize, din: usize, dout: usize) -> u64 {
    matmul(1, rows, din, dout) + (rows * dout) as u64 * cost::ELEMENTWISE
}

fn mlp(rows: usize, din: usize, hidden: usize, dout: usize) -> u64 {
    linear(rows, din, hidden) + cost::GELU_PER_ELEM * (rows * hidden) as u64 + linear(rows, hidden, dout)
}

fn layer_norm(rows: usize, d: usize) -> u64 {
    cost::LAYER_NORM_PER_ELEM * (rows * d) as u64
}

fn elementwise(n: usize) -> u64 {
    cost::ELEMENTWISE * n as u64
}

/// `p` tokens summarised into `k`.
fn summarize(variant: SummarizerVariant, p: usize, k: usize, d: usize, h: usize) -> u64 {
    let weighted = cost::SOFTMAX_PER_ELEM * (k * p) as u64 + matmul(1, k, p, d);
    match variant {
        SummarizerVariant::Mlp => {
            linear(p, d, h) + cost::GELU_PER_ELEM * (p * h) as u64 + matmul(1, p, h, k) + weighted
        }
        SummarizerVariant::LatentQuery => matmul(1, k, d, p) + elementwise(k * p) + weighted,
        SummarizerVariant::Pooling => (p * d + k * d) as u64,
    }
}

/// Self-attention of `q` query tokens over `kv` key/value tokens, with the
/// q/k/v projections applied to `q` new tokens only. Keys carry no bias.
fn attention(q: usize, kv: usize, d: usize, heads: usize) -> u64 {
    let dh = d / heads;
    let per_head = matmul(1, q, dh, kv)
        + elementwise(q * kv)
        + cost::SOFTMAX_PER_ELEM * (q * kv) as u64
        + matmul(1, q, kv, dh);
    3 * linear(q, d, d) - elementwise(q * d) + heads as u64 * per_head + linear(q, d, d)
}

fn processor(kind: ProcessorKind, depth: usize, tokens: usize, d: usize, hidden: usize, heads: usize, token_hidden: usize) -> u64 {
    let block = match kind {
        ProcessorKind::Transformer => {
            layer_norm(tokens, d)
                + attention(tokens, tokens, d, heads)
                + elementwise(tokens * d)
                + layer_norm(tokens, d)
                + mlp(tokens, d, hidden, d)
                + elementwise(tokens * d)
        }
        ProcessorKind::Mixer => {
            layer_norm(tokens, d)
                + mlp(d, tokens, token_hidden, tokens)
                + elementwise(tokens * d)
                + layer_norm(tokens, d)
                + mlp(tokens, d, hidden, d)
                + elementwise(tokens * d)
        }
        ProcessorKind::Mlp => layer_norm(tokens, d) + mlp(tokens, d, hidden, d) + elementwise(tokens * d),
    };
    depth as u64 * block
}

fn head(pooling: HeadPooling, tokens: usize, d: usize, classes: usize) -> u64 {
    let pool = match pooling {
        HeadPooling::Mean => token_mean(tokens, d),
        HeadPooling::First => 0,
    };
    pool + linear(1, d, classes)
}

fn cfg_processor(c: &TtmConfig) -> u64 {
    let p = &c.processor;
    processor(p.kind, p.depth, c.processor_tokens(), c.d, p.hidden, p.heads, c.token_hidden())
}

/// Memory rows held at the start of step `t`.
fn memory_rows(c: &TtmConfig, t: u64) -> usize {
    match c.write {
        WriteVariant::Concat => {
            let filled = (c.n as u64).saturating_mul(t - 1);
            filled.min(c.m as u64) as usize
        }
        _ => c.m,
    }
}

fn ttm_stages(c: &TtmConfig, t: u64) -> [u64; 4] {
    let (d, n, r, m) = (c.d, c.n, c.r, c.m);
    let h = c.summarizer_hidden();
    let l = memory_rows(c, t);
    let read = elementwise((l + n) * d) + summarize(c.summarizer, l + n, r, d, h);
    let write = match c.write {
        WriteVariant::Ttm | WriteVariant::NoMemory => {
            let p = l + r + n;
            elementwise(p * d) + summarize(c.summarizer, p, m, d, h)
        }
        WriteVariant::Concat => 0,
        WriteVariant::EraseAdd => {
            let proj = 3 * matmul(1, r, d, d) + cost::SIGMOID_PER_ELEM * (r * d) as u64;
            let per_token = matmul(1, l, d, 1)
                + elementwise(l)
                + cost::SOFTMAX_PER_ELEM * l as u64
                + matmul(1, l, 1, d)
                + cost::SCALE_SHIFT_PER_ELEM * (l * d) as u64
                + elementwise(l * d)
                + matmul(1, l, 1, d)
                + elementwise(l * d);
            proj + r as u64 * per_token
        }
    };
    [read, cfg_processor(c), write, head(c.pooling, r, d, c.classes)]
}

fn lstm_stages(c: &TtmConfig) -> [u64; 4] {
    let d = c.d;
    let process = token_mean(c.n, d)
        + 2 * matmul(1, 1, d, 4 * d)
        + 2 * elementwise(4 * d)
        + 3 * cost::SIGMOID_PER_ELEM * d as u64
        + 2 * cost::TANH_PER_ELEM * d as u64
        + 4 * elementwise(d);
    [0, process, 0, linear(1, d, c.classes)]
}

fn rt_stages(c: &TtmConfig) -> [u64; 4] {
    let read = elementwise((c.state_tokens + c.n) * c.d);
    [read, cfg_processor(c), 0, head(c.pooling, c.n, c.d, c.classes)]
}

fn causal_stages(c: &CausalCacheConfig, t: u64) -> Result<([u64; 4], u64)> {
    if c.heads == 0 || c.d % c.heads != 0 || c.depth == 0 || c.n == 0 {
        return Err(Error::config("causal_transformer", "needs n, depth >= 1 and heads dividing d"));
    }
    let (n, d) = (c.n, c.d);
    let ctx = (t as usize).saturating_mul(n);
    let block = layer_norm(n, d)
        + attention(n, ctx, d, c.heads)
        + elementwise(n * d)
        + layer_norm(n, d)
        + mlp(n, d, c.hidden, d)
        + elementwise(n * d);
    let process = c.depth as u64 * block;
    let block_params = 4 * d + 4 * d * d + 3 * d + d * c.hidden + c.hidden + c.hidden * d + d;
    let params = (c.depth * block_params + d * c.classes + c.classes) as u64;
    Ok(([0, process, 0, head(HeadPooling::Mean, n, d, c.classes)], params))
}

fn summarizer_params(v: SummarizerVariant, k: usize, d: usize, h: usize) -> usize {
    match v {
        SummarizerVariant::Mlp => d * h + h + h * k,
        SummarizerVariant::LatentQuery => k * d,
        SummarizerVariant::Pooling => 0,
    }
}

fn processor_params(c: &TtmConfig) -> usize {
    let (d, hid) = (c.d, c.processor.hidden);
    let mlp = |din: usize, h: usize, dout: usize| din * h + h + h * dout + dout;
    let block = match c.processor.kind {
        ProcessorKind::Transformer => 4 * d + 4 * d * d + 3 * d + mlp(d, hid, d),
        ProcessorKind::Mixer => {
            let tok = c.processor_tokens();
            4 * d + mlp(tok, c.token_hidden(), tok) + mlp(d, hid, d)
        }
        ProcessorKind::Mlp => 2 * d + mlp(d, hid, d),
    };
    c.processor.depth * block
}

/// Trainable scalar count; equals `Model::init(..).numel()`.
pub fn model_params(c: &TtmConfig) -> u64 {
    let (d, n, m, r) = (c.d, c.n, c.m, c.r);
    let h = c.summarizer_hidden();
    let embed = c.input_vocab * d;
    let head = d * c.classes + c.classes;
    let total = match c.arch {
        Arch::Ttm => {
            let write = match c.write {
                WriteVariant::Ttm | WriteVariant::NoMemory => summarizer_params(c.summarizer, m, d, h) + (m + r + n) * d,
                WriteVariant::Concat => 0,
                WriteVariant::EraseAdd => 3 * d * d,
            };
            let init = if c.learned_init && c.write != WriteVariant::Concat { m * d } else { 0 };
            embed + summarizer_params(c.summarizer, r, d, h) + (m + n) * d + processor_params(c) + write + head + init
        }
        Arch::Lstm => embed + 2 * d * 4 * d + 4 * d + head,
        Arch::RecurrentTransformer => {
            let init = if c.learned_init { c.state_tokens * d } else { 0 };
            embed + (c.state_tokens + n) * d + processor_params(c) + head + init
        }
    };
    total as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::{ProcessorConfig, ALL_PROCESSORS, ALL_SUMMARIZERS, ALL_WRITES};
    use crate::model::Model;

    fn small(s: SummarizerVariant, p: ProcessorKind, w: WriteVariant) -> TtmConfig {
        let mut c = TtmConfig::tiny(s, p, w);
        c.d = 4;
        c.r = 2;
        c.m = 2;
        c.n = 2;
        c.processor = ProcessorConfig {
            kind: p,
            depth: 1,
            hidden: 8,
            heads: 2,
            token_hidden: None,
        };
        c
    }

    /// Runtime stage counts of steps `1..=steps` at batch `b`.
    fn runtime(c: &TtmConfig, steps: usize, b: usize) -> Vec<BTreeMap<&'static str, u64>> {
        let model = Model::new(c.clone()).unwrap();
        let store = model.init::<f32>(0).unwrap();
        let mut tape = Tape::with_params(&store);
        let mut s = model.initial_vars(&mut tape, b).unwrap();
        let mut out = Vec::new();
        for t in 0..steps {
            let ids: Vec<usize> = (0..b * c.n).map(|i| (i + t) % c.input_vocab).collect();
            let x = model.embed(&mut tape, &ids, b).unwrap();
            let before = tape.stage_flops().clone();
            s = model.step(&mut tape, s, x).unwrap().1;
            let delta = tape
                .stage_flops()
                .iter()
                .map(|(k, v)| (*k, v - before.get(k).copied().unwrap_or(0)))
                .collect();
            out.push(delta);
        }
        out
    }

    fn check_against_runtime(c: &TtmConfig) {
        let b = 3;
        for (i, rt) in runtime(c, 4, b).into_iter().enumerate() {
            let r = count_flops(&Descriptor::Model(c.clone()), i as u64 + 1).unwrap();
            for stage in STAGES {
                let want = rt.get(stage).copied().unwrap_or(0);
                assert_eq!(r.stage(stage) * b as u64, want, "{:?} {stage} t={}", c, i + 1);
            }
        }
        let store = Model::new(c.clone()).unwrap().init::<f32>(0).unwrap();
        assert_eq!(model_params(c), store.numel() as u64, "{c:?}");
    }

    #[test]
    fn static_counts_equal_runtime_counts() {
        for s in ALL_SUMMARIZERS {
            for p in ALL_PROCESSORS {
                for w in ALL_WRITES {
                    check_against_runtime(&small(s, p, w));
                }
            }
        }
        let mut c = small(SummarizerVariant::Mlp, ProcessorKind::Transformer, WriteVariant::Ttm);
        c.pooling = HeadPooling::First;
        c.learned_init = true;
        check_against_runtime(&c);
        for arch in [Arch::Lstm, Arch::RecurrentTransformer] {
            for p in ALL_PROCESSORS {
                let mut c = small(SummarizerVariant::Mlp, p, WriteVariant::Ttm);
                c.arch = arch;
                check_against_runtime(&c);
            }
        }
    }

    #[test]
    fn bounded_cells_are_step_invariant() {
        let mut c = TtmConfig::video_default(ProcessorKind::Transformer);
        for arch in [Arch::Ttm, Arch::Lstm, Arch::RecurrentTransformer] {
            c.arch = arch;
            let d = Descriptor::Model(c.clone());
            let a = count_flops(&d, 1).unwrap();
            for t in [1_000, 1_000_000] {
                let b = count_flops(&d, t).unwrap();
                assert_eq!((a.total, &a.stages), (b.total, &b.stages));
            }
        }
    }

    #[test]
    fn concat_is_constant_once_full() {
        let c = small(SummarizerVariant::Mlp, ProcessorKind::Mlp, WriteVariant::Concat);
        let d = Descriptor::Model(c);
        let f = |t| count_flops(&d, t).unwrap().total;
        assert!(f(1) < f(2));
        assert_eq!(f(2), f(3));
        assert_eq!(f(2), f(1_000_000));
    }

    #[test]
    fn causal_reference_grows() {
        let d = Descriptor::CausalCache(CausalCacheConfig {
            n: 16,
            d: 64,
            depth: 2,
            hidden: 128,
            heads: 4,
            classes: 10,
        });
        for k in [1u64, 2, 7, 100, 5000] {
            let a = count_flops(&d, k).unwrap().total;
            let b = count_flops(&d, 2 * k).unwrap().total;
            assert!(b > a, "t={k}");
        }
    }

    #[test]
    fn video_default_orderings() {
        let tr = TtmConfig::video_default(ProcessorKind::Transformer);
        let mx = TtmConfig::video_default(ProcessorKind::Mixer);
        let f = |c: &TtmConfig| count_flops(&Descriptor::Model(c.clone()), 1).unwrap().total;
        assert!(f(&mx) < f(&tr));
        let mut wide = tr.clone();
        wide.n = 3136;
        assert!(f(&tr) < f(&wide));
        assert_eq!(f(&tr), f(&tr.clone()));
    }

    #[test]
    fn report_sums_its_stages() {
        let r = count_flops(&Descriptor::Model(TtmConfig::video_default(ProcessorKind::Mlp)), 5).unwrap();
        assert_eq!(r.total, r.stages.values().sum::<u64>());
        assert_eq!(r.stages.len(), 4);
    }

    #[test]
    fn descriptor_parsing() {
        let unknown = r#"{"arch": "ntm", "n": 1}"#;
        assert!(matches!(Descriptor::from_json(unknown), Err(Error::Unsupported(_))));
        let causal = r#"{"arch": "causal_transformer", "n": 2, "d": 8, "depth": 1, "hidden": 16, "heads": 2, "classes": 3}"#;
        assert!(matches!(Descriptor::from_json(causal).unwrap(), Descriptor::CausalCache(_)));
        let cfg = TtmConfig::tiny(SummarizerVariant::Mlp, ProcessorKind::Mixer, WriteVariant::Ttm);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(Descriptor::from_json(&text).unwrap(), Descriptor::Model(cfg));
        assert!(count_flops(&Descriptor::from_json(causal).unwrap(), 0).is_err());
    }

    #[test]
    fn compare_csv_rows() {
        let descs = vec![
            ("tr".to_string(), Descriptor::Model(TtmConfig::video_default(ProcessorKind::Transformer))),
            ("mx".to_string(), Descriptor::Model(TtmConfig::video_default(ProcessorKind::Mixer))),
        ];
        let csv = compare(&descs, 1).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("tr,ttm,1,"));
    }
}
