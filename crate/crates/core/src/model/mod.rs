//! The AT-DKT model: a question encoder with a KC-tagging head, an LSTM
//! over fused question/KC/interaction embeddings, a prior-knowledge head and
//! the response predictor.

mod graph;
mod losses;
mod params;

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

pub use graph::{forward, Feedback, FeedbackMode, ForwardOptions, Graph, StepOutputs};
pub use losses::{loss_ik, loss_kt, loss_qt, total_loss, LossValues};
pub use params::{EncoderLayer, KtHead, Linear, LstmWeights, Mlp, QuestionPath, Weights};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which auxiliary tasks are trained.
///
/// `NoQtNoIk` also removes the question path and the non-linear predictor,
/// which leaves a vanilla DKT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    Full,
    NoIk,
    NoQt,
    NoQtNoIk,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoIk,
        Variant::NoQt,
        Variant::NoQtNoIk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIk => "no_ik",
            Variant::NoQt => "no_qt",
            Variant::NoQtNoIk => "no_qt_no_ik",
        }
    }

    pub fn uses_qt(self) -> bool {
        matches!(self, Variant::Full | Variant::NoIk)
    }

    pub fn uses_ik(self) -> bool {
        matches!(self, Variant::Full | Variant::NoQt)
    }

    /// Whether the graph is the plain DKT recurrence over interactions only.
    pub fn is_vanilla(self) -> bool {
        self == Variant::NoQtNoIk
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Embedding size; also the LSTM hidden size.
    pub dim: usize,
    pub num_kcs: usize,
    pub num_questions: usize,
    pub heads: usize,
    pub enc_layers: usize,
    /// Steps `t <= ik_delay` (1-based) are excluded from the IK loss.
    pub ik_delay: usize,
    pub qt_weight: f64,
    pub ik_weight: f64,
    pub variant: Variant,
    /// Rows of the positional table; sequences may not be longer.
    pub max_len: usize,
    pub positional: bool,
    /// Scale attention scores by `1/sqrt(dim / heads)`.
    pub scaled_attention: bool,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Dropout on the LSTM input and the knowledge state during training.
    pub dropout: f64,
    pub init: InitConfig,
}

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InitConfig {
    /// Std of the normal distribution used for embedding tables.
    pub embed_std: f64,
    /// Initial LSTM forget-gate bias.
    pub forget_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            embed_std: 1.0,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn new(dim: usize, num_kcs: usize, num_questions: usize) -> Self {
        ModelConfig {
            dim,
            num_kcs,
            num_questions,
            heads: 4,
            enc_layers: 1,
            ik_delay: 10,
            qt_weight: 0.5,
            ik_weight: 0.5,
            variant: Variant::Full,
            max_len: crate::data::DEFAULT_MAX_LEN,
            positional: true,
            scaled_attention: true,
            ffn_mult: 4,
            dropout: 0.0,
            init: InitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim < 2 || self.dim % 2 != 0 {
            return fail(format!("dim must be even and >= 2, got {}", self.dim));
        }
        if self.num_kcs == 0 || self.num_questions == 0 {
            return fail("question and KC counts must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if !self.variant.is_vanilla() && self.enc_layers == 0 {
            return fail("the question encoder needs at least one layer".into());
        }
        if !(self.qt_weight >= 0.0 && self.ik_weight >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.max_len == 0 || self.ffn_mult == 0 {
            return fail("max_len and ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn attention_scale(&self) -> f64 {
        if self.scaled_attention {
            1.0 / crate::math::sqrt((self.dim / self.heads) as f64)
        } else {
            1.0
        }
    }
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AtDkt {
    pub config: ModelConfig,
    pub params: Weights<Tensor>,
}

impl AtDkt {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Weights::init(&config, seed);
        Ok(AtDkt { config, params })
    }

    /// Wraps loaded parameters, checking every array against the shapes the
    /// configuration implies.
    pub fn from_parts(config: ModelConfig, params: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(AtDkt { config, params })
    }

    /// Registers the parameters on `tape` as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Weights<crate::tape::Var> {
        self.params.map(&mut |_, t| tape.leaf(t.clone()))
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.len());
        n
    }
}
