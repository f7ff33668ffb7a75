//! Model hyperparameters.

use crate::error::{Error, Result};

/// How the input window is turned into attention tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// One token per variate: the whole lookback series of a variable is
    /// embedded as a single token (no positional encoding needed).
    Variate,
    /// One token per time step, with a learned additive positional encoding.
    Temporal,
}

impl EmbeddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "variate" => Ok(EmbeddingMode::Variate),
            "temporal" => Ok(EmbeddingMode::Temporal),
            other => Err(Error::Config(format!(
                "embedding_mode must be `variate` or `temporal`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingMode::Variate => "variate",
            EmbeddingMode::Temporal => "temporal",
        }
    }
}

/// All model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Lookback window length L.
    pub lookback: usize,
    /// Prediction horizon H.
    pub horizon: usize,
    /// Number of variates N.
    pub variates: usize,
    /// Token width D.
    pub model_width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
    /// Odd moving-average width for the seasonal/trend split.
    pub decomposition_kernel: usize,
    /// Dropout probability in [0, 1), applied in train mode only.
    pub dropout: f64,
    pub use_decomposition: bool,
    pub embedding_mode: EmbeddingMode,
    /// Additionally reverse the series along time before everything else.
    pub time_flip: bool,
    /// Sum a trend embedding into the tokens instead of adding a separate
    /// trend projection at the output.
    pub embed_trend: bool,
    /// 1 = single dense embedding/projection, 2 = two-layer MLP with relu.
    pub embedding_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 24,
            variates: 7,
            model_width: 128,
            heads: 8,
            layers: 2,
            ffn_width: 256,
            decomposition_kernel: 25,
            dropout: 0.1,
            use_decomposition: true,
            embedding_mode: EmbeddingMode::Variate,
            time_flip: false,
            embed_trend: false,
            embedding_depth: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("variates", self.variates),
            ("model_width", self.model_width),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_width", self.ffn_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_width {} must be divisible by heads {}",
                self.model_width, self.heads
            )));
        }
        if self.decomposition_kernel % 2 == 0 || self.decomposition_kernel == 0 {
            return Err(Error::EvenKernel {
                kernel: self.decomposition_kernel,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.embedding_depth == 1 || self.embedding_depth == 2) {
            return Err(Error::Config(format!(
                "embedding_depth must be 1 or 2, got {}",
                self.embedding_depth
            )));
        }
        if self.embed_trend && !self.use_decomposition {
            return Err(Error::Config(
                "embed_trend requires use_decomposition".into(),
            ));
        }
        if self.embed_trend && self.embedding_mode == EmbeddingMode::Temporal {
            return Err(Error::Config(
                "embed_trend is only available in variate embedding mode".into(),
            ));
        }
        Ok(())
    }
}
