//! Super-resolution branch: rectification, pixel encoding, clue-guided
//! sequential residual blocks and the 2× image decoder.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ops::{self, Interp};
use crate::nn::{BatchNorm2d, BiGru, Builder, Conv2d, Init, Linear};
use crate::DEVICE;

/// Resolution of the thumbnail the localizer looks at.
pub const LOC_GRID: (usize, usize) = (4, 16);
const IDENTITY: [f32; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
/// Per-entry clamp of the affine parameters: scale terms stay in [0.5, 1.5],
/// shear and translation in [-0.5, 0.5].
const THETA_LO: [f32; 6] = [0.5, -0.5, -0.5, -0.5, 0.5, -0.5];
const THETA_HI: [f32; 6] = [1.5, 0.5, 0.5, 0.5, 1.5, 0.5];

/// Affine spatial transformer. The localizer sees an area-downsampled
/// thumbnail and regresses the six affine parameters; it starts with zero
/// weights and an identity bias, so a fresh model applies the identity warp.
#[derive(Debug, Clone)]
pub struct Stn {
    pub loc: Linear,
}

impl Stn {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let inp = cfg.channels * LOC_GRID.0 * LOC_GRID.1;
        b.scope("stn.loc", |b| {
            Ok(Self {
                loc: Linear {
                    weight: b.param("weight", &[6, inp], Init::Zeros)?,
                    bias: Some(b.param_values("bias", &[6], IDENTITY.to_vec())?),
                },
            })
        })
    }

    /// Clamped affine parameters `(B, 6)` mapping output to input coordinates
    /// (normalized to [-1, 1], pixel centers at half-integers).
    pub fn theta(&self, lr: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = lr.dims4()?;
        let thumb = ops::resize(lr, LOC_GRID.0, LOC_GRID.1, Interp::Area)?.reshape((b, ()))?;
        let raw = self.loc.forward(&thumb)?;
        let lo = Tensor::new(&THETA_LO, &DEVICE)?;
        let hi = Tensor::new(&THETA_HI, &DEVICE)?;
        Ok(raw.broadcast_maximum(&lo)?.broadcast_minimum(&hi)?)
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        let theta = self.theta(lr)?;
        Ok(ops::affine_sample(lr, &theta)?)
    }
}

/// `conv3×3 → ReLU` from image channels to the pixel-feature width.
#[derive(Debug, Clone)]
pub struct PixelEncoder {
    pub conv: Conv2d,
}

impl PixelEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, "encoder", cfg.channels, cfg.hidden_channels, 3, true)?,
        })
    }

    pub fn forward(&self, rectified: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(rectified)?.relu()?)
    }
}

/// One clue-guided sequential residual block.
///
/// `conv → BN → ReLU`, channel-concatenation with the clue, a 1×1 fusion back
/// to C′ channels, a bidirectional recurrent scan along width and then along
/// height, and a residual connection from the block input.
#[derive(Debug, Clone)]
pub struct SrbStage {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub fuse: Conv2d,
    pub gru_w: BiGru,
    pub gru_h: BiGru,
}

impl SrbStage {
    pub fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.hidden_channels;
        b.scope(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "conv", c, c, 3, false)?,
                bn: BatchNorm2d::new(b, "bn", c)?,
                fuse: Conv2d::new(b, "fuse", 2 * c, c, 1, true)?,
                gru_w: BiGru::new(b, "gru_w", c, cfg.srb_hidden)?,
                gru_h: BiGru::new(b, "gru_h", c, cfg.srb_hidden)?,
            })
        })
    }

    pub fn forward(&self, h_prev: &Tensor, clue: &Tensor, train: bool) -> Result<Tensor> {
        if h_prev.dims() != clue.dims() {
            return Err(Error::Shape(format!(
                "pixel feature {:?} and semantic clue {:?} differ",
                h_prev.dims(),
                clue.dims()
            )));
        }
        let (b, c, h, w) = h_prev.dims4()?;
        let x = self.bn.forward(&self.conv.forward(h_prev)?, train)?.relu()?;
        let x = self.fuse.forward(&Tensor::cat(&[&x, clue], 1)?)?;
        // Width scan over rows: (B·H, W, C).
        let rows = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h, w, c))?;
        let x = self.gru_w.forward(&rows)?.reshape((b, h, w, c))?;
        // Height scan over columns: (B·W, H, C).
        let cols = x.permute((0, 2, 1, 3))?.contiguous()?.reshape((b * w, h, c))?;
        let x = self.gru_h.forward(&cols)?.reshape((b, w, h, c))?.permute((0, 3, 2, 1))?;
        Ok((h_prev + x)?)
    }
}

/// Maps a pixel feature to the 2× image.
///
/// `conv3×3 → pixel shuffle` gives the (C′/4)×2H×2W feature `h_hat`; `ReLU →
/// conv3×3` then predicts a residual, made zero-mean per image and channel,
/// on top of the bicubic upscale of the input; the sum is clamped to [0, 1] in the forward pass while
/// the backward pass treats the clamp as identity, so saturated pixels still
/// receive the loss gradient.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub expand: Conv2d,
    pub project: Conv2d,
}

/// Initial weight scale of the residual projection; the untrained decoder
/// reproduces the bicubic base up to a small perturbation.
const PROJECT_STD: f32 = 1e-3;

impl Decoder {
    pub fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.hidden_channels;
        b.scope(name, |b| {
            Ok(Self {
                expand: Conv2d::new(b, "expand", c, c, 3, true)?,
                project: Conv2d::with_init(b, "project", c / 4, cfg.channels, 3, Init::Normal(PROJECT_STD), None)?,
            })
        })
    }

    /// Returns `(h_hat, sr)`.
    pub fn forward(&self, h: &Tensor, base: &Tensor) -> Result<(Tensor, Tensor)> {
        let h_hat = ops::pixel_shuffle(&self.expand.forward(h)?)?;
        let residual = self.project.forward(&h_hat.relu()?)?;
        if residual.dims() != base.dims() {
            return Err(Error::Shape(format!(
                "decoder output {:?} vs base image {:?}",
                residual.dims(),
                base.dims()
            )));
        }
        let residual = residual.broadcast_sub(&residual.mean_keepdim((2, 3))?)?;
        let sr = ops::unit_clamp_pass_through(&(residual + base)?)?;
        Ok((h_hat, sr))
    }
}

/// Bicubic 2× upscale of the input, the anchor every decoder adds its
/// zero-mean residual to.
pub fn bicubic_base(rectified: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = rectified.dims4()?;
    Ok(ops::resize(rectified, 2 * h, 2 * w, Interp::Bicubic)?)
}

/// The super-resolution branch without guidance stages.
#[derive(Debug, Clone)]
pub struct SrModel {
    pub stn: Stn,
    pub encoder: PixelEncoder,
    pub stages: Vec<SrbStage>,
    pub decoder: Decoder,
}

impl SrModel {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        b.scope("sr", |b| {
            let stn = Stn::new(b, cfg)?;
            let encoder = PixelEncoder::new(b, cfg)?;
            let stages = (1..=cfg.iterations)
                .map(|i| SrbStage::new(b, &format!("srb{i}"), cfg))
                .collect::<Result<Vec<_>>>()?;
            let decoder = Decoder::new(b, "decoder", cfg)?;
            Ok(Self { stn, encoder, stages, decoder })
        })
    }

    /// Rectified input for the pixel encoder, and the bicubic base of the
    /// unrectified input. The base stays in the frame of `lr`, which is the
    /// frame the HR target lives in.
    pub fn rectify(&self, lr: &Tensor) -> Result<(Tensor, Tensor)> {
        let rect = self.stn.forward(lr)?;
        let base = bicubic_base(lr)?;
        Ok((rect, base))
    }

    /// Runs the branch end to end with zero clues at every stage.
    pub fn forward_unguided(&self, lr: &Tensor, train: bool) -> Result<Tensor> {
        let (rect, base) = self.rectify(lr)?;
        let mut h = self.encoder.forward(&rect)?;
        for stage in &self.stages {
            h = stage.forward(&h, &h.zeros_like()?, train)?;
        }
        Ok(self.decoder.forward(&h, &base)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::testutil::{max_abs_diff, uniform, values};
    use candle_core::Var;

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, SrModel) {
        let mut store = ParamStore::new();
        let model = SrModel::new(&mut store.builder(seed), cfg).unwrap();
        (store, model)
    }

    #[test]
    fn fresh_stn_is_identity() {
        let (_, m) = build(&ModelConfig::tiny(), 0);
        let lr = uniform(&[2, 3, 16, 64], 0.0, 1.0, 1);
        let out = m.stn.forward(&lr).unwrap();
        assert_eq!(out.dims(), lr.dims());
        assert!(max_abs_diff(&out, &lr) < 1e-5);
    }

    #[test]
    fn stn_two_pixel_shift_matches_direct_warp() {
        let (store, m) = build(&ModelConfig::tiny(), 0);
        let (h, w) = (16usize, 64usize);
        // Translation of 2 pixels: normalized offset 2·2/W.
        let bias = Tensor::new(&[1f32, 0.0, 4.0 / w as f32, 0.0, 1.0, 0.0], &DEVICE).unwrap();
        store.assign("sr.stn.loc.bias", &bias).unwrap();
        let lr = uniform(&[1, 3, h, w], 0.0, 1.0, 2);
        let out = values(&m.stn.forward(&lr).unwrap());
        let src = values(&lr);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    // Sample at x + 2, border-replicated; exactly on a pixel center.
                    let sx = (x + 2).min(w - 1);
                    let want = src[(c * h + y) * w + sx];
                    let got = out[(c * h + y) * w + x];
                    assert!((got - want).abs() < 1e-5, "({c},{y},{x}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn pixel_encoder_shapes_and_batching() {
        let cfg = ModelConfig::default();
        let (_, m) = build(&cfg, 3);
        let a = uniform(&[1, 3, 16, 64], 0.0, 1.0, 4);
        let b = uniform(&[1, 3, 16, 64], 0.0, 1.0, 5);
        let fa = m.encoder.forward(&a).unwrap();
        let fb = m.encoder.forward(&b).unwrap();
        assert_eq!(fa.dims(), &[1, 64, 16, 64]);
        assert!(max_abs_diff(&fa, &fb) > 1e-3);
        let both = m.encoder.forward(&Tensor::cat(&[&a, &b], 0).unwrap()).unwrap();
        assert_eq!(max_abs_diff(&both.narrow(0, 0, 1).unwrap(), &fa), 0.0);
        assert_eq!(max_abs_diff(&both.narrow(0, 1, 1).unwrap(), &fb), 0.0);
    }

    #[test]
    fn srb_shape_clue_liveness_and_mismatch() {
        let cfg = ModelConfig::default();
        let (_, m) = build(&cfg, 6);
        let h = uniform(&[1, 64, 16, 64], -1.0, 1.0, 7);
        let clue = uniform(&[1, 64, 16, 64], -1.0, 1.0, 8);
        let stage = &m.stages[0];
        let with = stage.forward(&h, &clue, false).unwrap();
        let without = stage.forward(&h, &clue.zeros_like().unwrap(), false).unwrap();
        assert_eq!(with.dims(), &[1, 64, 16, 64]);
        assert!(max_abs_diff(&with, &without) > 1e-4);
        let bad = uniform(&[1, 64, 16, 32], 0.0, 1.0, 9);
        assert!(matches!(stage.forward(&h, &bad, false), Err(Error::Shape(_))));
    }

    #[test]
    fn srb_output_sum_has_nonzero_clue_gradient() {
        let mut cfg = ModelConfig::tiny();
        cfg.iterations = 1;
        let (_, m) = build(&cfg, 10);
        let h = uniform(&[1, 32, 16, 64], -1.0, 1.0, 11);
        let clue0 = uniform(&[1, 32, 16, 64], -1.0, 1.0, 12);
        let clue = Var::from_tensor(&clue0).unwrap();
        let stage = &m.stages[0];
        let grads = stage.forward(&h, &clue, false).unwrap().sum_all().unwrap().backward().unwrap();
        let g = values(grads.get(&clue).unwrap());
        let base = values(&clue0);
        let eps = 1e-2f32;
        for idx in [0usize, 1000, 20_000] {
            let probe = |delta: f32| {
                let mut v = base.clone();
                v[idx] += delta;
                let c = Tensor::from_vec(v, (1, 32, 16, 64), &DEVICE).unwrap();
                stage.forward(&h, &c, false).unwrap()
            };
            // Difference elementwise before summing to avoid cancellation in the totals.
            let diff = (probe(eps) - probe(-eps)).unwrap().to_dtype(candle_core::DType::F64).unwrap();
            let fd = (diff.sum_all().unwrap().to_scalar::<f64>().unwrap() / (2.0 * eps as f64)) as f32;
            assert!(fd.abs() > 1e-4, "finite difference at {idx} vanished");
            assert!((fd - g[idx]).abs() < 5e-2 * g[idx].abs().max(0.1), "{idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn decoder_shape_and_range() {
        let cfg = ModelConfig::default();
        let (_, m) = build(&cfg, 13);
        let h = uniform(&[2, 64, 16, 64], -3.0, 3.0, 14);
        let base = bicubic_base(&uniform(&[2, 3, 16, 64], 0.0, 1.0, 15)).unwrap();
        let (h_hat, sr) = m.decoder.forward(&h, &base).unwrap();
        assert_eq!(h_hat.dims(), &[2, 16, 32, 128]);
        assert_eq!(h_hat.elem_count(), 2 * 64 * 16 * 64);
        assert_eq!(sr.dims(), &[2, 3, 32, 128]);
        assert!(values(&sr).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unguided_branch_keeps_batch_and_trains_every_stage() {
        let cfg = ModelConfig::tiny();
        let (store, m) = build(&cfg, 16);
        let lr = uniform(&[2, 3, 16, 64], 0.0, 1.0, 17);
        let hr = uniform(&[2, 3, 32, 128], 0.0, 1.0, 18);
        let sr = m.forward_unguided(&lr, true).unwrap();
        assert_eq!(sr.dims(), &[2, 3, 32, 128]);
        let loss = (sr - hr).unwrap().abs().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.params().iter().filter(|(n, _)| n.starts_with("sr.srb")) {
            let g = grads.get(var).unwrap_or_else(|| panic!("{name} has no gradient"));
            let mag = g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(mag > 0.0, "{name} has zero gradient");
        }
    }
}
