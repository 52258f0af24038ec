//! Model and run configuration. Configs are strict JSON: unknown keys are
//! rejected and the canonical form has sorted keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Ttm,
    Lstm,
    RecurrentTransformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarizerVariant {
    Mlp,
    LatentQuery,
    Pooling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteVariant {
    /// Token-summarisation write.
    Ttm,
    /// FIFO append of input tokens.
    Concat,
    /// Attention-addressed erase and add.
    EraseAdd,
    /// Summarisation write followed by zeroing.
    NoMemory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    Transformer,
    Mixer,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPooling {
    #[default]
    Mean,
    First,
}

pub const ALL_SUMMARIZERS: [SummarizerVariant; 3] = [
    SummarizerVariant::Mlp,
    SummarizerVariant::LatentQuery,
    SummarizerVariant::Pooling,
];
pub const ALL_PROCESSORS: [ProcessorKind; 3] = [
    ProcessorKind::Transformer,
    ProcessorKind::Mixer,
    ProcessorKind::Mlp,
];
pub const ALL_WRITES: [WriteVariant; 4] = [
    WriteVariant::Ttm,
    WriteVariant::Concat,
    WriteVariant::EraseAdd,
    WriteVariant::NoMemory,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorConfig {
    pub kind: ProcessorKind,
    pub depth: usize,
    /// Channel-MLP width.
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Token-mixing MLP width for the mixer; defaults to twice the token count.
    #[serde(default)]
    pub token_hidden: Option<usize>,
}

fn default_heads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtmConfig {
    #[serde(default = "default_arch")]
    pub arch: Arch,
    /// Input tokens per step.
    pub n: usize,
    /// Memory tokens.
    pub m: usize,
    /// Read tokens.
    pub r: usize,
    /// Channels.
    pub d: usize,
    pub processor: ProcessorConfig,
    pub summarizer: SummarizerVariant,
    /// Hidden width of the MLP summarizer; defaults to `d`.
    #[serde(default)]
    pub summarizer_hidden: Option<usize>,
    pub write: WriteVariant,
    pub classes: usize,
    /// Rows of the input embedding table.
    pub input_vocab: usize,
    /// Steps per unrolled segment.
    pub unroll: usize,
    #[serde(default)]
    pub pooling: HeadPooling,
    #[serde(default)]
    pub learned_init: bool,
    /// State tokens of the recurrent-transformer baseline.
    #[serde(default = "default_state_tokens")]
    pub state_tokens: usize,
}

fn default_arch() -> Arch {
    Arch::Ttm
}

fn default_state_tokens() -> usize {
    16
}

impl TtmConfig {
    /// A small TTM suitable for tests and desk experiments.
    pub fn tiny(
        summarizer: SummarizerVariant,
        processor: ProcessorKind,
        write: WriteVariant,
    ) -> Self {
        Self {
            arch: Arch::Ttm,
            n: 4,
            m: 4,
            r: 2,
            d: 8,
            processor: ProcessorConfig {
                kind: processor,
                depth: 1,
                hidden: 16,
                heads: 2,
                token_hidden: None,
            },
            summarizer,
            summarizer_hidden: None,
            write,
            classes: 3,
            input_vocab: 6,
            unroll: 3,
            pooling: HeadPooling::Mean,
            learned_init: false,
            state_tokens: 2,
        }
    }

    /// The video-detection default: `n=16, m=96, r=16, d=512`, four blocks.
    pub fn video_default(processor: ProcessorKind) -> Self {
        Self {
            arch: Arch::Ttm,
            n: 16,
            m: 96,
            r: 16,
            d: 512,
            processor: ProcessorConfig {
                kind: processor,
                depth: 4,
                hidden: 2048,
                heads: 8,
                token_hidden: None,
            },
            summarizer: SummarizerVariant::Mlp,
            summarizer_hidden: None,
            write: WriteVariant::Ttm,
            classes: 157,
            input_vocab: 1,
            unroll: 6,
            pooling: HeadPooling::Mean,
            learned_init: false,
            state_tokens: 16,
        }
    }

    pub fn summarizer_hidden(&self) -> usize {
        self.summarizer_hidden.unwrap_or(self.d)
    }

    /// Tokens the processing unit sees per step.
    pub fn processor_tokens(&self) -> usize {
        match self.arch {
            Arch::RecurrentTransformer => self.state_tokens + self.n,
            _ => self.r,
        }
    }

    pub fn token_hidden(&self) -> usize {
        self.processor
            .token_hidden
            .unwrap_or(2 * self.processor_tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("m", self.m),
            ("r", self.r),
            ("d", self.d),
            ("classes", self.classes),
            ("input_vocab", self.input_vocab),
            ("unroll", self.unroll),
            ("processor.depth", self.processor.depth),
            ("processor.hidden", self.processor.hidden),
            ("processor.heads", self.processor.heads),
            ("state_tokens", self.state_tokens),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.d % self.processor.heads != 0 {
            return Err(Error::config(
                "processor.heads",
                format!("d={} not divisible by heads={}", self.d, self.processor.heads),
            ));
        }
        if self.summarizer_hidden() == 0 || self.token_hidden() == 0 {
            return Err(Error::config("summarizer_hidden", "must be positive"));
        }
        if self.arch == Arch::Ttm && self.summarizer == SummarizerVariant::Pooling {
            // Concat memory starts empty, so the first read pools n tokens.
            let min_read = if self.write == WriteVariant::Concat {
                self.n
            } else {
                self.m + self.n
            };
            if self.r > min_read {
                return Err(Error::config(
                    "r",
                    format!("pooling summarizer needs r <= {min_read}, got {}", self.r),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Copy {
        steps: usize,
        n: usize,
        vocab: usize,
        #[serde(default)]
        per_step: bool,
    },
    DelayedRecall {
        steps: usize,
        gap: usize,
        vocab: usize,
        n: usize,
    },
    AssocRecall {
        pairs: usize,
        vocab: usize,
    },
}

impl TaskConfig {
    pub fn vocab(&self) -> usize {
        match *self {
            TaskConfig::Copy { vocab, .. }
            | TaskConfig::DelayedRecall { vocab, .. }
            | TaskConfig::AssocRecall { vocab, .. } => vocab,
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        match *self {
            TaskConfig::Copy { n, .. } | TaskConfig::DelayedRecall { n, .. } => n,
            TaskConfig::AssocRecall { .. } => 2,
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            TaskConfig::Copy { steps, .. } | TaskConfig::DelayedRecall { steps, .. } => steps,
            TaskConfig::AssocRecall { pairs, .. } => pairs + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    LastStep,
    AllSteps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarryMode {
    /// Detached state is carried into the next segment.
    Carry,
    /// Each segment starts from the initial state.
    Reset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    SigmoidCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub warmup: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub supervision: Supervision,
    pub carry: CarryMode,
    pub loss: LossKind,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub eval_interval: usize,
    /// Held-out episodes scored at the end of training.
    pub eval_episodes: usize,
    /// Capacity of the batch prefetch queue; 0 generates inline.
    #[serde(default)]
    pub prefetch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub output_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: TtmConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let path = if path == "." { format!("line {} column {}", inner.line(), inner.column()) } else { path };
            Error::config(path, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sorted-key JSON; parsing it back yields an equal config.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| prefix_path(e, "model"))?;
        let t = &self.task;
        let vocab = t.vocab();
        if vocab < 2 {
            return Err(Error::config("task.vocab", "must be at least 2"));
        }
        let want_vocab = crate::tasks::input_vocab(vocab);
        if self.model.input_vocab != want_vocab {
            return Err(Error::config(
                "model.input_vocab",
                format!("task needs {want_vocab}, got {}", self.model.input_vocab),
            ));
        }
        if self.model.classes != vocab {
            return Err(Error::config(
                "model.classes",
                format!("task has {vocab} classes, got {}", self.model.classes),
            ));
        }
        if self.model.n != t.tokens_per_step() {
            return Err(Error::config(
                "model.n",
                format!("task emits {} tokens per step, got {}", t.tokens_per_step(), self.model.n),
            ));
        }
        match *t {
            TaskConfig::DelayedRecall { steps, gap, .. } if gap >= steps => {
                return Err(Error::config("task.gap", "gap must be smaller than steps"));
            }
            TaskConfig::AssocRecall { pairs, vocab } if pairs == 0 || pairs > vocab => {
                return Err(Error::config("task.pairs", "need 1 <= pairs <= vocab"));
            }
            TaskConfig::Copy { steps: 0, .. } | TaskConfig::DelayedRecall { steps: 0, .. } => {
                return Err(Error::config("task.steps", "must be positive"));
            }
            _ => {}
        }
        let tr = &self.train;
        if tr.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if tr.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be positive"));
        }
        if !(tr.lr >= 0.0 && tr.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&tr.label_smoothing) {
            return Err(Error::config("train.label_smoothing", "must be in [0, 1)"));
        }
        if let Some(c) = tr.clip_norm {
            if c <= 0.0 {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

fn prefix_path(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { path, msg } => Error::Config {
            path: format!("{prefix}.{path}"),
            msg,
        },
        other => other,
    }
}

/// Serializes through `serde_json::Value`, whose maps are key-sorted.
pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}
