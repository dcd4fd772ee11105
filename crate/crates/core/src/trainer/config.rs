use std::fmt;
use std::str::FromStr;

use crate::error::{L4qError, Result};
use crate::optim::AdamWConfig;
use crate::qinit::InitScheme;
use crate::quantizer::QuantSpec;

/// Fine-tuning method applied to every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Full-precision frozen base plus an adapter; no quantizer.
    Lora,
    /// Quantizer parameters and the weight itself are trained.
    LsqQat,
    /// Quantized frozen base plus a separate full-precision adapter.
    QatLora,
    /// Adapter merged into the weight before quantization.
    L4q,
    /// Frozen quantized base plus a group-pooled adapter that folds into the biases.
    QaLora,
    /// Round-to-nearest quantized base; only the head trains.
    PtqFrozen,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Self::Lora,
        Self::LsqQat,
        Self::QatLora,
        Self::L4q,
        Self::QaLora,
        Self::PtqFrozen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::LsqQat => "lsq-qat",
            Self::QatLora => "qat-lora",
            Self::L4q => "l4q",
            Self::QaLora => "qa-lora",
            Self::PtqFrozen => "ptq-frozen",
        }
    }

    pub fn uses_adapter(&self) -> bool {
        matches!(self, Self::Lora | Self::QatLora | Self::L4q | Self::QaLora)
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, Self::Lora)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = L4qError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(Method::name).collect();
                L4qError::Config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Regression => "regression",
            Self::Classification => "classification",
        }
    }
}

impl FromStr for TaskKind {
    type Err = L4qError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Self::Regression),
            "classification" => Ok(Self::Classification),
            _ => Err(L4qError::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Floating-point type used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = L4qError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            _ => Err(L4qError::Config(format!("unknown precision `{s}`"))),
        }
    }
}

/// Shape of the synthetic task and of the model trained on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskShape {
    /// Hidden layers, each `width x width`.
    pub depth: usize,
    pub width: usize,
    /// Regression outputs or number of classes.
    pub out_dim: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Rank of the teacher's per-layer weight change.
    pub teacher_rank: usize,
    /// Relative size of the teacher's weight change.
    pub teacher_shift: f64,
    /// Fraction of base-weight input columns scaled up into outliers.
    pub outlier_frac: f64,
    pub outlier_gain: f64,
    /// Fraction of input features drawn from a heavy-tailed law.
    pub heavy_feature_frac: f64,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            depth: 3,
            width: 64,
            out_dim: 8,
            n_train: 2048,
            n_eval: 512,
            teacher_rank: 4,
            teacher_shift: 0.5,
            outlier_frac: 0.0625,
            outlier_gain: 6.0,
            heavy_feature_frac: 0.0625,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub task: TaskKind,
    pub shape: TaskShape,
    pub n_bits: u8,
    pub group_size: usize,
    pub rank: usize,
    pub alpha: f64,
    pub init: InitScheme,
    pub freeze_bias: bool,
    pub lr: f64,
    /// Multiplier on `lr` for quantization scales and biases.
    pub quant_lr_scale: f64,
    pub warmup_frac: f64,
    pub optim: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate on the held-out split every this many steps (and after the last).
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::L4q,
            task: TaskKind::Regression,
            shape: TaskShape::default(),
            n_bits: 4,
            group_size: 32,
            rank: 4,
            alpha: 1.0,
            init: InitScheme::L4q,
            freeze_bias: false,
            lr: 1e-2,
            quant_lr_scale: 0.03,
            warmup_frac: 0.1,
            optim: AdamWConfig::default(),
            steps: 1000,
            batch_size: 32,
            eval_every: 25,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in snapshot order.
pub const CONFIG_KEYS: [&str; 30] = [
    "method",
    "task",
    "precision",
    "depth",
    "width",
    "out_dim",
    "n_train",
    "n_eval",
    "teacher_rank",
    "teacher_shift",
    "outlier_frac",
    "outlier_gain",
    "heavy_feature_frac",
    "bits",
    "group_size",
    "rank",
    "alpha",
    "init",
    "freeze_bias",
    "lr",
    "quant_lr_scale",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "warmup_frac",
    "steps",
    "batch_size",
    "eval_every",
    "seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| L4qError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(L4qError::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.n_bits, self.group_size)
    }

    /// Sets one `key = value` pair. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse()?,
            "task" => self.task = v.parse()?,
            "precision" => self.precision = v.parse()?,
            "depth" => self.shape.depth = parse(key, v)?,
            "width" => self.shape.width = parse(key, v)?,
            "out_dim" => self.shape.out_dim = parse(key, v)?,
            "n_train" => self.shape.n_train = parse(key, v)?,
            "n_eval" => self.shape.n_eval = parse(key, v)?,
            "teacher_rank" => self.shape.teacher_rank = parse(key, v)?,
            "teacher_shift" => self.shape.teacher_shift = parse(key, v)?,
            "outlier_frac" => self.shape.outlier_frac = parse(key, v)?,
            "outlier_gain" => self.shape.outlier_gain = parse(key, v)?,
            "heavy_feature_frac" => self.shape.heavy_feature_frac = parse(key, v)?,
            "bits" | "n_bits" => self.n_bits = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "rank" => self.rank = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "init" => self.init = v.parse()?,
            "freeze_bias" => self.freeze_bias = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "quant_lr_scale" => self.quant_lr_scale = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "eps" => self.optim.eps = parse(key, v)?,
            "warmup_frac" => self.warmup_frac = parse(key, v)?,
            "steps" | "total_steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(L4qError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`; feeding these back through
    /// [`set`](Self::set) reproduces the config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.shape;
        vec![
            ("method", self.method.name().to_string()),
            ("task", self.task.name().to_string()),
            ("precision", self.precision.name().to_string()),
            ("depth", s.depth.to_string()),
            ("width", s.width.to_string()),
            ("out_dim", s.out_dim.to_string()),
            ("n_train", s.n_train.to_string()),
            ("n_eval", s.n_eval.to_string()),
            ("teacher_rank", s.teacher_rank.to_string()),
            ("teacher_shift", s.teacher_shift.to_string()),
            ("outlier_frac", s.outlier_frac.to_string()),
            ("outlier_gain", s.outlier_gain.to_string()),
            ("heavy_feature_frac", s.heavy_feature_frac.to_string()),
            ("bits", self.n_bits.to_string()),
            ("group_size", self.group_size.to_string()),
            ("rank", self.rank.to_string()),
            ("alpha", self.alpha.to_string()),
            ("init", self.init.name().to_string()),
            ("freeze_bias", self.freeze_bias.to_string()),
            ("lr", self.lr.to_string()),
            ("quant_lr_scale", self.quant_lr_scale.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("eps", self.optim.eps.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        let bad = |msg: String| Err(L4qError::Config(msg));
        if !(1..=4).contains(&s.depth) {
            return bad(format!("depth must be 1..=4, got {}", s.depth));
        }
        if s.width == 0 || s.out_dim == 0 || s.n_train == 0 || s.n_eval == 0 {
            return bad("width, out_dim, n_train and n_eval must be positive".into());
        }
        if self.task == TaskKind::Classification && s.out_dim < 2 {
            return bad("classification needs out_dim >= 2".into());
        }
        if !(0.0..=1.0).contains(&s.outlier_frac) || !(0.0..=1.0).contains(&s.heavy_feature_frac) {
            return bad("outlier_frac and heavy_feature_frac must lie in [0, 1]".into());
        }
        if s.teacher_rank == 0 || !(s.teacher_shift >= 0.0) || !(s.outlier_gain > 0.0) {
            return bad("teacher_rank >= 1, teacher_shift >= 0 and outlier_gain > 0 required".into());
        }
        self.spec()?.groups_per_row(s.width)?;
        if self.method.uses_adapter() && self.rank == 0 {
            return bad(format!("method {} needs rank >= 1", self.method));
        }
        let rate_ok = |v: f64| v >= 0.0 && v.is_finite();
        if !self.alpha.is_finite() || !rate_ok(self.lr) || !rate_ok(self.quant_lr_scale) {
            return bad("alpha, lr and quant_lr_scale must be finite, rates >= 0".into());
        }
        if self.batch_size == 0 || self.batch_size > s.n_train {
            return bad(format!("batch_size must be in 1..={}", s.n_train));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]".into());
        }
        self.optim.validate()
    }
}
