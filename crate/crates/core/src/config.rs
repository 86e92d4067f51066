//! Architecture hyperparameters and their consistency rules.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Letters first, then digits. Class index of a character is its position here plus one.
pub const DEFAULT_CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Every shape in the model derives from these fields.
///
/// The serialized key names (`L`, `H`, `W`, `C`, `C_prime`, `M`, `D`, ...) are
/// the ones accepted in configuration files. Keys that are absent take their
/// default value; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of mutual-guidance iterations.
    #[serde(rename = "L")]
    pub iterations: usize,
    /// Low-resolution image height.
    #[serde(rename = "H")]
    pub height: usize,
    /// Low-resolution image width.
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    /// Channel count of the pixel feature.
    #[serde(rename = "C_prime")]
    pub hidden_channels: usize,
    /// Token count of the semantic feature.
    #[serde(rename = "M")]
    pub tokens: usize,
    /// Token dimensionality of the semantic feature.
    #[serde(rename = "D")]
    pub token_dim: usize,
    pub charset: String,
    pub blank_index: usize,
    /// Transformer layers per recognition stage.
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    /// Hidden width of the MLP inside each transformer layer, as a multiple of `D`.
    pub mlp_ratio: usize,
    /// Hidden size per direction of the recurrent scans in each SRB block.
    pub srb_hidden: usize,
    /// Width strides of the four transposed convolutions in the clue projector.
    /// Height stride is always 2.
    pub projector_width_strides: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            height: 16,
            width: 64,
            channels: 3,
            hidden_channels: 64,
            tokens: 32,
            token_dim: 196,
            charset: DEFAULT_CHARSET.to_string(),
            blank_index: 0,
            encoder_depth: 2,
            encoder_heads: 4,
            mlp_ratio: 2,
            srb_hidden: 32,
            projector_width_strides: vec![2, 1, 1, 1],
        }
    }
}

impl ModelConfig {
    /// Small model used for overfit runs: C'=32, D=64, one encoder layer per stage.
    pub fn tiny() -> Self {
        Self {
            hidden_channels: 32,
            token_dim: 64,
            encoder_depth: 1,
            srb_hidden: 16,
            ..Self::default()
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    /// Size of the class axis of every distribution: the charset plus the CTC blank.
    pub fn num_classes(&self) -> usize {
        self.charset.chars().count() + 1
    }

    pub fn hr_height(&self) -> usize {
        2 * self.height
    }

    pub fn hr_width(&self) -> usize {
        2 * self.width
    }

    /// Width of the recognition patches, `W // 32`.
    pub fn rec_patch_width(&self) -> usize {
        self.width / 32
    }

    /// Width of the pixel-clue patches, `W // 16`, taken over the 2× feature.
    pub fn clue_patch_width(&self) -> usize {
        self.width / 16
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.encoder_heads
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        validate_config(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as toml")
    }
}

/// Returns `cfg` unchanged if every invariant holds, otherwise names the first one violated.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    let fail = |msg: &str| Err(Error::Config(msg.to_string()));
    if cfg.iterations == 0 {
        return fail("L must be positive");
    }
    if cfg.channels != 3 {
        return fail("C must be 3");
    }
    if cfg.width == 0 || !cfg.width.is_multiple_of(32) {
        return fail("W not divisible by 32");
    }
    if cfg.height == 0 || !cfg.height.is_multiple_of(2) {
        return fail("H not even");
    }
    if cfg.tokens != cfg.width / (cfg.width / 32) {
        return fail("M inconsistent with the W // 32 patch rule");
    }
    if cfg.hidden_channels == 0 || !cfg.hidden_channels.is_multiple_of(4) {
        return fail("C_prime not divisible by 4");
    }
    if cfg.charset != DEFAULT_CHARSET {
        return fail("charset must be the 26 lowercase letters followed by the 10 digits");
    }
    if cfg.blank_index != 0 {
        return fail("blank_index must be 0");
    }
    if cfg.token_dim == 0 {
        return fail("D must be positive");
    }
    if cfg.encoder_heads == 0 || !cfg.token_dim.is_multiple_of(cfg.encoder_heads) {
        return fail("D not divisible by encoder_heads");
    }
    if cfg.encoder_depth == 0 {
        return fail("encoder_depth must be positive");
    }
    if cfg.mlp_ratio == 0 {
        return fail("mlp_ratio must be positive");
    }
    if 2 * cfg.srb_hidden != cfg.hidden_channels {
        return fail("srb_hidden must be C_prime / 2");
    }
    if cfg.projector_width_strides.len() != 4 || cfg.projector_width_strides.contains(&0) {
        return fail("projector_width_strides must hold four positive strides");
    }
    Ok(cfg)
}
