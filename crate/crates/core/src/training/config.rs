use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{HeadWeights, LossSettings};
use crate::metrics::F1Average;
use crate::models::{AuConfig, AuFusion, ModelSpec, Stage1Config, Stage2Config};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Stage1,
    Stage2,
    Au,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

macro_rules! keyword_enum {
    ($t:ident, $what:literal, [$(($v:ident, $s:literal)),+ $(,)?]) => {
        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($t::$v),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", $what, " `{}` (valid: {})"),
                        other,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($t::$v => $s,)+
                })
            }
        }
    };
}

keyword_enum!(
    Task,
    "task",
    [(Stage1, "stage1"), (Stage2, "stage2"), (Au, "au")]
);
keyword_enum!(OptimizerKind, "optimizer", [(Adam, "adam"), (Sgd, "sgd")]);
keyword_enum!(
    ScheduleKind,
    "schedule",
    [(Constant, "constant"), (Cosine, "cosine")]
);

/// Everything that shapes a training run. Serialized as flat
/// `key = value` text into logs and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub schedule: ScheduleKind,
    /// Cosine cycle length in epochs.
    pub t0: f64,
    pub t_mult: f64,
    pub eta_min: f64,
    pub batch_size: usize,
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
    pub heads: HeadWeights,
    pub k_folds: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub f1_average: F1Average,
    pub threshold: f64,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub trf_blocks: usize,
    pub trf_heads: usize,
    pub ff_mult: usize,
    pub attn_layers: usize,
    pub d_attn: usize,
    pub radius: usize,
    /// AU expansion width; 0 means twice the input width.
    pub au_expand: usize,
    pub au_t1_blocks: usize,
    pub au_t2_blocks: usize,
    pub au_fusion: AuFusion,
    /// Also score the training split after every epoch.
    pub eval_train: bool,
}

impl TrainConfig {
    pub fn defaults(task: Task) -> Self {
        let base = Self {
            task,
            epochs: 25,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            schedule: ScheduleKind::Constant,
            t0: 5.0,
            t_mult: 1.0,
            eta_min: 1e-5,
            batch_size: 16,
            window: 64,
            stride: 64,
            seed: 0,
            heads: HeadWeights::default(),
            k_folds: 5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            clip_norm: 5.0,
            f1_average: F1Average::Macro,
            threshold: 0.5,
            gru_hidden: 256,
            gru_layers: 2,
            trf_blocks: 1,
            trf_heads: 4,
            ff_mult: 4,
            attn_layers: 2,
            d_attn: 64,
            radius: 5,
            au_expand: 0,
            au_t1_blocks: 2,
            au_t2_blocks: 2,
            au_fusion: AuFusion::All,
            eval_train: false,
        };
        match task {
            Task::Stage1 => base,
            Task::Stage2 => Self {
                gru_layers: 4,
                ..base
            },
            Task::Au => Self {
                epochs: 20,
                lr: 0.01,
                optimizer: OptimizerKind::Sgd,
                schedule: ScheduleKind::Cosine,
                clip_norm: 0.0,
                ..base
            },
        }
    }

    /// Builds a config from ordered `(key, value)` pairs on top of the
    /// defaults of the task they name (stage1 when absent). Later pairs win.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let task = pairs
            .iter()
            .rev()
            .find(|(k, _)| k.as_ref() == "task")
            .map(|(_, v)| v.as_ref().parse())
            .transpose()?
            .unwrap_or(Task::Stage1);
        let mut cfg = Self::defaults(task);
        for (k, v) in pairs {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str, ty: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("`{key}` expects {ty}, got `{value}`")))
        }
        let int = |v: &str| num::<usize>(key, v, "a non-negative integer");
        let real = |v: &str| num::<f64>(key, v, "a number");
        match key {
            "task" => self.task = value.parse()?,
            "epochs" => self.epochs = int(value)?,
            "lr" => self.lr = real(value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "momentum" => self.momentum = real(value)?,
            "schedule" => self.schedule = value.parse()?,
            "t0" => self.t0 = real(value)?,
            "t_mult" => self.t_mult = real(value)?,
            "eta_min" => self.eta_min = real(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "window" => self.window = int(value)?,
            "stride" => self.stride = int(value)?,
            "seed" => self.seed = num(key, value, "an unsigned 64-bit integer")?,
            "lambda_fused" => self.heads.fused = real(value)?,
            "lambda_gru" => self.heads.gru = real(value)?,
            "lambda_trf" => self.heads.transformer = real(value)?,
            "k_folds" => self.k_folds = int(value)?,
            "focal_gamma" => self.focal_gamma = real(value)?,
            "focal_alpha" => self.focal_alpha = real(value)?,
            "clip_norm" => self.clip_norm = real(value)?,
            "f1_average" => self.f1_average = value.parse()?,
            "threshold" => self.threshold = real(value)?,
            "gru_hidden" => self.gru_hidden = int(value)?,
            "gru_layers" => self.gru_layers = int(value)?,
            "trf_blocks" => self.trf_blocks = int(value)?,
            "trf_heads" => self.trf_heads = int(value)?,
            "ff_mult" => self.ff_mult = int(value)?,
            "attn_layers" => self.attn_layers = int(value)?,
            "d_attn" => self.d_attn = int(value)?,
            "radius" => self.radius = int(value)?,
            "au_expand" => self.au_expand = int(value)?,
            "au_t1_blocks" => self.au_t1_blocks = int(value)?,
            "au_t2_blocks" => self.au_t2_blocks = int(value)?,
            "au_fusion" => self.au_fusion = value.parse()?,
            "eval_train" => self.eval_train = num(key, value, "true or false")?,
            other => {
                return Err(Error::config(format!(
                    "unknown config key `{other}` (valid: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("stride", self.stride),
            ("gru_hidden", self.gru_hidden),
            ("gru_layers", self.gru_layers),
            ("trf_blocks", self.trf_blocks),
            ("trf_heads", self.trf_heads),
            ("ff_mult", self.ff_mult),
            ("d_attn", self.d_attn),
            ("au_t1_blocks", self.au_t1_blocks),
            ("au_t2_blocks", self.au_t2_blocks),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{k}` must be at least 1")));
            }
        }
        if self.stride > self.window {
            return Err(Error::config(format!(
                "`stride` ({}) cannot exceed `window` ({})",
                self.stride, self.window
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "`lr` must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "`momentum` must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.t0 >= 1.0 && self.t_mult >= 1.0) {
            return Err(Error::config(
                "cosine schedule needs `t0` >= 1 and `t_mult` >= 1",
            ));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr) {
            return Err(Error::config(format!(
                "`eta_min` must lie in [0, lr], got {}",
                self.eta_min
            )));
        }
        if self.k_folds < 2 {
            return Err(Error::config("`k_folds` must be at least 2"));
        }
        if !(self.clip_norm >= 0.0) || !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0) {
            return Err(Error::config(
                "`clip_norm` and `focal_gamma` must be >= 0, `focal_alpha` > 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("`threshold` must lie in [0, 1]"));
        }
        let h = self.heads;
        if [h.fused, h.gru, h.transformer].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            heads: self.heads,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
        }
    }

    /// Network topology for this task over `d_in`-wide inputs.
    pub fn model_spec(&self, d_in: usize) -> ModelSpec {
        match self.task {
            Task::Stage1 => ModelSpec::Stage1(Stage1Config {
                d_in,
                gru_hidden: self.gru_hidden,
                gru_layers: self.gru_layers,
                blocks: self.trf_blocks,
                heads: self.trf_heads,
                ff_mult: self.ff_mult,
            }),
            Task::Stage2 => ModelSpec::Stage2(Stage2Config {
                d_in,
                gru_hidden: self.gru_hidden,
                gru_layers: self.gru_layers,
                attn_layers: self.attn_layers,
                d_attn: self.d_attn,
                radius: self.radius,
            }),
            Task::Au => ModelSpec::Au(AuConfig {
                d_in,
                d_expand: if self.au_expand == 0 {
                    2 * d_in
                } else {
                    self.au_expand
                },
                t1_blocks: self.au_t1_blocks,
                t2_blocks: self.au_t2_blocks,
                heads: self.trf_heads,
                ff_mult: self.ff_mult,
                fusion: self.au_fusion,
            }),
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", fmt_f64(self.lr)),
            ("optimizer", self.optimizer.to_string()),
            ("momentum", fmt_f64(self.momentum)),
            ("schedule", self.schedule.to_string()),
            ("t0", fmt_f64(self.t0)),
            ("t_mult", fmt_f64(self.t_mult)),
            ("eta_min", fmt_f64(self.eta_min)),
            ("batch_size", self.batch_size.to_string()),
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda_fused", fmt_f64(self.heads.fused)),
            ("lambda_gru", fmt_f64(self.heads.gru)),
            ("lambda_trf", fmt_f64(self.heads.transformer)),
            ("k_folds", self.k_folds.to_string()),
            ("focal_gamma", fmt_f64(self.focal_gamma)),
            ("focal_alpha", fmt_f64(self.focal_alpha)),
            ("clip_norm", fmt_f64(self.clip_norm)),
            ("f1_average", self.f1_average.to_string()),
            ("threshold", fmt_f64(self.threshold)),
            ("gru_hidden", self.gru_hidden.to_string()),
            ("gru_layers", self.gru_layers.to_string()),
            ("trf_blocks", self.trf_blocks.to_string()),
            ("trf_heads", self.trf_heads.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("attn_layers", self.attn_layers.to_string()),
            ("d_attn", self.d_attn.to_string()),
            ("radius", self.radius.to_string()),
            ("au_expand", self.au_expand.to_string()),
            ("au_t1_blocks", self.au_t1_blocks.to_string()),
            ("au_t2_blocks", self.au_t2_blocks.to_string()),
            ("au_fusion", self.au_fusion.to_string()),
            ("eval_train", self.eval_train.to_string()),
        ]
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::defaults(Task::Stage1)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

const KEYS: [&str; 35] = [
    "task",
    "epochs",
    "lr",
    "optimizer",
    "momentum",
    "schedule",
    "t0",
    "t_mult",
    "eta_min",
    "batch_size",
    "window",
    "stride",
    "seed",
    "lambda_fused",
    "lambda_gru",
    "lambda_trf",
    "k_folds",
    "focal_gamma",
    "focal_alpha",
    "clip_norm",
    "f1_average",
    "threshold",
    "gru_hidden",
    "gru_layers",
    "trf_blocks",
    "trf_heads",
    "ff_mult",
    "attn_layers",
    "d_attn",
    "radius",
    "au_expand",
    "au_t1_blocks",
    "au_t2_blocks",
    "au_fusion",
    "eval_train",
];

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected `key = value`, got `{line}`",
                i + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
