//! The aggregation network: sequence building, masked batch normalization,
//! parallel feature projections, 2-D rotary position encoding, multi-head
//! Cartesian-product attention with a learnable Gaussian distance bias, and
//! the encoder → processor → decoder pipeline with inducing points.

mod attention;
mod checkpoint;
mod forward;
mod params;
mod rope;
mod sequence;

pub use attention::{mcpa_forward, McpaInput, McpaVars};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{BatchStats, ParamVars};
pub use params::{count_params, BatchNormParams, DenseParams, GAModel, McpaParams};
pub use rope::{apply_rope, rope_cos_sin, rope_scales};
pub use sequence::{build_sequence, ClipMode, ContextSequence};

use crate::autodiff::AdError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty neighborhood: no context point within the query radius; increase the radius")]
    EmptyNeighborhood,
    #[error("sequence has {got} covariates, model expects {want}")]
    CovariateMismatch { got: usize, want: usize },
    #[error("batch normalization needs at least 2 unmasked rows, got {0}")]
    TooFewUnmasked(usize),
    #[error("forward pass on an empty batch")]
    EmptyBatch,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

/// The three published variants: processors × inducing points × sequence cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mini,
    Small,
    Large,
}

impl Variant {
    /// (processor count, inducing points, max sequence length)
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Variant::Mini => (0, 0, 81),
            Variant::Small => (1, 4, 144),
            Variant::Large => (2, 8, 256),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mini" => Ok(Variant::Mini),
            "small" => Ok(Variant::Small),
            "large" => Ok(Variant::Large),
            other => Err(format!("unknown variant '{other}' (mini|small|large)")),
        }
    }
}

/// Architecture hyperparameters. `heads_per_stream` is H: each attention
/// layer forms H² heads by pairing the H x-stream projections with the H
/// y-stream projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GAConfig {
    pub d_model: usize,
    pub heads_per_stream: usize,
    pub n_processors: usize,
    pub n_inducing: usize,
    pub max_seq_len: usize,
    pub lambda_init: f64,
    pub lambda_learnable: bool,
    pub n_covariates: usize,
}

impl GAConfig {
    pub fn variant(v: Variant, n_covariates: usize) -> Self {
        let (n_processors, n_inducing, max_seq_len) = v.dims();
        GAConfig {
            d_model: 32,
            heads_per_stream: 2,
            n_processors,
            n_inducing,
            max_seq_len,
            lambda_init: 1.0,
            lambda_learnable: true,
            n_covariates,
        }
    }

    /// Width of each of the two embedding streams.
    pub fn stream_width(&self) -> usize {
        self.d_model / 2
    }

    /// Per-stream head projection width d_c, from 2·d_c·H² = d_model.
    pub fn head_width(&self) -> usize {
        self.d_model / (2 * self.heads_per_stream * self.heads_per_stream)
    }

    pub fn n_heads(&self) -> usize {
        self.heads_per_stream * self.heads_per_stream
    }

    /// Hidden width of the scalar output head.
    pub fn head_hidden(&self) -> usize {
        2 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let h2 = self.heads_per_stream * self.heads_per_stream;
        if self.heads_per_stream == 0 || self.d_model % (2 * h2) != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must equal 2·d_c·H² for integer d_c (H = {})",
                self.d_model, self.heads_per_stream
            )));
        }
        if self.stream_width() % 4 != 0 {
            return Err(ModelError::Config(format!(
                "stream width {} must be divisible by 4 for the rotary scales",
                self.stream_width()
            )));
        }
        if (self.n_inducing == 0) != (self.n_processors == 0) {
            return Err(ModelError::Config(format!(
                "inducing points ({}) and processors ({}) must be zero together",
                self.n_inducing, self.n_processors
            )));
        }
        if self.n_covariates == 0 {
            return Err(ModelError::Config("need at least one covariate".into()));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::Config("max sequence length must be positive".into()));
        }
        Ok(())
    }
}
