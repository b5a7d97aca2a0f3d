//! Model and training hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::AdamConfig;
use crate::variational::AnnealSchedule;

/// The four response generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Seq2seq,
    Cvae,
    CvaeSimple,
    Ctvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Seq2seq,
        ModelKind::CvaeSimple,
        ModelKind::Cvae,
        ModelKind::Ctvae,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Seq2seq => "seq2seq",
            ModelKind::Cvae => "cvae",
            ModelKind::CvaeSimple => "cvae-simple",
            ModelKind::Ctvae => "ctvae",
        }
    }

    pub fn is_variational(self) -> bool {
        !matches!(self, ModelKind::Seq2seq)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq2seq" => Ok(ModelKind::Seq2seq),
            "cvae" => Ok(ModelKind::Cvae),
            "cvae-simple" => Ok(ModelKind::CvaeSimple),
            "ctvae" => Ok(ModelKind::Ctvae),
            other => Err(format!(
                "unknown model kind `{other}` (expected seq2seq, cvae, cvae-simple or ctvae)"
            )),
        }
    }
}

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Generator(ModelKind),
    Tcd,
    Lm,
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkKind::Generator(k) => write!(f, "{k}"),
            NetworkKind::Tcd => f.write_str("tcd"),
            NetworkKind::Lm => f.write_str("lm"),
        }
    }
}

impl FromStr for NetworkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcd" => Ok(NetworkKind::Tcd),
            "lm" => Ok(NetworkKind::Lm),
            other => other.parse().map(NetworkKind::Generator),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub vocab_cap: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub anneal: AnnealSchedule,
    pub max_decode_len: usize,
    /// Posts and responses are truncated to this many tokens before framing.
    pub max_seq_len: usize,
    pub seed: u64,
    pub init_std: f64,
    pub epochs: usize,
    /// Stops training after this many optimizer steps when set.
    pub max_steps: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Ctvae,
            embed_dim: 300,
            hidden_dim: 300,
            latent_dim: 100,
            vocab_cap: 35_000,
            batch_size: 128,
            lr: 5e-4,
            anneal: AnnealSchedule::default(),
            max_decode_len: 30,
            max_seq_len: 30,
            seed: 0,
            init_std: 0.02,
            epochs: 10,
            max_steps: None,
        }
    }
}

impl ModelConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("max_decode_len", self.max_decode_len),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.kind.is_variational() && self.latent_dim == 0 {
            return Err("latent_dim must be positive for variational models".into());
        }
        if self.vocab_cap < 5 {
            return Err("vocab_cap must leave room for at least one word".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be a positive finite number".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err("init_std must be a non-negative finite number".into());
        }
        self.anneal.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Dimensions and training regime of the auxiliary networks (the coherence
/// discriminator and the evaluation language model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub init_std: f64,
    pub max_steps: Option<u64>,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig::from_model(&ModelConfig::default())
    }
}

impl AuxConfig {
    /// Shares dimensions and optimizer settings with a generator config.
    pub fn from_model(m: &ModelConfig) -> Self {
        AuxConfig {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            batch_size: m.batch_size,
            lr: m.lr,
            epochs: m.epochs,
            max_seq_len: m.max_seq_len,
            seed: m.seed,
            init_std: m.init_std,
            max_steps: m.max_steps,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return Err("dimensions, batch size and max_seq_len must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be a positive finite number".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err("init_std must be a non-negative finite number".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}
