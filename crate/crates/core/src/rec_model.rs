//! Recognition branch: patch embedding of the LR image, clue-fused transformer
//! stages and the CTC head.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, EncoderLayer, Linear, PatchEmbed};

/// `H × (W/32)` patches of the raw LR image → `(B, M, D)`.
pub fn token_embed(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<PatchEmbed> {
    PatchEmbed::new(b, name, cfg.channels, (cfg.height, cfg.rec_patch_width()), cfg.tokens, cfg.token_dim)
}

/// One stage of clue-fused encoding: `[h_prev; clue]` along the token axis
/// (previous feature first), transformer layers, first M tokens kept.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStage {
    pub fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        b.scope(name, |b| {
            let layers = (0..cfg.encoder_depth)
                .map(|l| EncoderLayer::new(b, &format!("layer{l}"), cfg.token_dim, cfg.encoder_heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { layers })
        })
    }

    pub fn forward(&self, h_prev: &Tensor, clue: &Tensor) -> Result<Tensor> {
        let (b, m, d) = h_prev.dims3()?;
        let (cb, _, cd) = clue.dims3()?;
        if cd != d || cb != b {
            return Err(Error::Shape(format!(
                "semantic feature {:?} and pixel clue {:?} differ",
                h_prev.dims(),
                clue.dims()
            )));
        }
        let mut x = Tensor::cat(&[h_prev, clue], 1)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x.narrow(1, 0, m)?)
    }
}

/// Per-token affine map to `|charset| + 1` logits.
pub fn ctc_linear(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Linear> {
    Linear::new(b, name, cfg.token_dim, cfg.num_classes())
}

#[derive(Debug, Clone)]
pub struct RecModel {
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
    pub head: Linear,
}

impl RecModel {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        b.scope("rec", |b| {
            let embed = token_embed(b, "embed", cfg)?;
            let stages = (1..=cfg.iterations)
                .map(|i| EncoderStage::new(b, &format!("enc{i}"), cfg))
                .collect::<Result<Vec<_>>>()?;
            let head = ctc_linear(b, "head", cfg)?;
            Ok(Self { embed, stages, head })
        })
    }

    pub fn embed_tokens(&self, lr: &Tensor) -> Result<Tensor> {
        self.embed.forward(lr)
    }

    /// Logits `(B, M, |charset| + 1)`; no normalization applied.
    pub fn ctc_head(&self, h: &Tensor) -> Result<Tensor> {
        self.head.forward(h)
    }
}
