//! One mutual-guidance stage: turns the recognizer state into a semantic clue
//! for the SR branch and the SR state into a pixel clue for the recognizer,
//! emitting an intermediate SR image and two intermediate distributions.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::ops::{self, Interp};
use crate::nn::{BatchNorm2d, BlockConvTranspose, Builder, Linear, PatchEmbed};
use crate::rec_model::ctc_linear;
use crate::sr_model::Decoder;

/// Lifts a `(B, M, K)` distribution to a `(B, C′, H, W)` map: softmax, view as
/// a height-1 width-M map with K channels, four block transposed convolutions
/// each followed by batch norm (ReLU between them), bilinear resize to `(H, W)`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub layers: Vec<(BlockConvTranspose, BatchNorm2d)>,
    pub out_hw: (usize, usize),
}

impl Projector {
    pub fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        b.scope(name, |b| {
            let mut layers = Vec::with_capacity(4);
            let mut inp = cfg.num_classes();
            for (j, &sw) in cfg.projector_width_strides.iter().enumerate() {
                let ct = BlockConvTranspose::new(b, &format!("t{j}"), inp, cfg.hidden_channels, 2, sw)?;
                let bn = BatchNorm2d::new(b, &format!("bn{j}"), cfg.hidden_channels)?;
                layers.push((ct, bn));
                inp = cfg.hidden_channels;
            }
            Ok(Self {
                layers,
                out_hw: (cfg.height, cfg.width),
            })
        })
    }

    pub fn forward(&self, logits: &Tensor, train: bool) -> Result<Tensor> {
        let (b, m, k) = logits.dims3()?;
        let probs = ops::softmax_last(logits)?;
        let mut x = probs.transpose(1, 2)?.contiguous()?.reshape((b, k, 1, m))?;
        let last = self.layers.len() - 1;
        for (j, (ct, bn)) in self.layers.iter().enumerate() {
            x = bn.forward(&ct.forward(&x)?, train)?;
            if j != last {
                x = x.relu()?;
            }
        }
        Ok(ops::resize(&x, self.out_hw.0, self.out_hw.1, Interp::Bilinear)?)
    }
}

/// The five networks of one stage, each with its own parameters.
#[derive(Debug, Clone)]
pub struct GuidanceStage {
    pub ctc1: Linear,
    pub projector: Projector,
    pub decoder: Decoder,
    pub vit: PatchEmbed,
    pub ctc2: Linear,
}

/// Everything one stage emits.
#[derive(Debug, Clone)]
pub struct GuideOutput {
    /// `(B, C′, H, W)`, fed to the SR stage.
    pub semantic_clue: Tensor,
    /// `(B, M, D)`, fed to the recognizer stage.
    pub pixel_clue: Tensor,
    /// `(B, C, 2H, 2W)`.
    pub sr: Tensor,
    /// Logits `(B, M, K)` read from the semantic feature.
    pub p: Tensor,
    /// Logits `(B, M, K)` read from the pixel clue.
    pub p_hat: Tensor,
    /// `(B, C′/4, 2H, 2W)` pixel-shuffled feature behind `sr`.
    pub h_hat: Tensor,
}

impl GuidanceStage {
    pub fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ctc1: ctc_linear(b, "ctc1", cfg)?,
                projector: Projector::new(b, "proj", cfg)?,
                decoder: Decoder::new(b, "decoder", cfg)?,
                vit: PatchEmbed::new(
                    b,
                    "vit",
                    cfg.hidden_channels / 4,
                    (cfg.hr_height(), cfg.clue_patch_width()),
                    cfg.tokens,
                    cfg.token_dim,
                )?,
                ctc2: ctc_linear(b, "ctc2", cfg)?,
            })
        })
    }

    pub fn ctc1(&self, h_s: &Tensor) -> Result<Tensor> {
        self.ctc1.forward(h_s)
    }

    pub fn project_clue(&self, p: &Tensor, train: bool) -> Result<Tensor> {
        self.projector.forward(p, train)
    }

    /// Returns `(h_hat, sr)`.
    pub fn conv_decode(&self, h_p: &Tensor, base: &Tensor) -> Result<(Tensor, Tensor)> {
        self.decoder.forward(h_p, base)
    }

    pub fn vit_clue(&self, h_hat: &Tensor) -> Result<Tensor> {
        self.vit.forward(h_hat)
    }

    pub fn ctc2(&self, pixel_clue: &Tensor) -> Result<Tensor> {
        self.ctc2.forward(pixel_clue)
    }

    /// Semantic path `h_s → p → c^s`; pixel path `h_p → (ĥ, I^SR) → c^p → p̂`.
    pub fn guide(&self, h_p: &Tensor, h_s: &Tensor, base: &Tensor, train: bool) -> Result<GuideOutput> {
        let p = self.ctc1(h_s)?;
        let semantic_clue = self.project_clue(&p, train)?;
        let (h_hat, sr) = self.conv_decode(h_p, base)?;
        let pixel_clue = self.vit_clue(&h_hat)?;
        let p_hat = self.ctc2(&pixel_clue)?;
        Ok(GuideOutput {
            semantic_clue,
            pixel_clue,
            sr,
            p,
            p_hat,
            h_hat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::softmax_last;
    use crate::nn::ParamStore;
    use crate::sr_model::bicubic_base;
    use crate::testutil::{max_abs_diff, uniform, values};
    use crate::DEVICE;

    struct Fixture {
        store: ParamStore,
        stages: Vec<GuidanceStage>,
        h_p: Tensor,
        h_s: Tensor,
        base: Tensor,
    }

    fn fixture(cfg: &ModelConfig) -> Fixture {
        let mut store = ParamStore::new();
        let mut b = store.builder(0);
        let stages = (1..=2).map(|i| GuidanceStage::new(&mut b, &format!("guide{i}"), cfg).unwrap()).collect();
        let (c, h, w) = (cfg.hidden_channels, cfg.height, cfg.width);
        Fixture {
            stages,
            h_p: uniform(&[2, c, h, w], -1.0, 1.0, 1),
            h_s: uniform(&[2, cfg.tokens, cfg.token_dim], -1.0, 1.0, 2),
            base: bicubic_base(&uniform(&[2, 3, h, w], 0.0, 1.0, 3)).unwrap(),
            store,
        }
    }

    #[test]
    fn guide_output_shapes_and_composition() {
        let cfg = ModelConfig::default();
        let f = fixture(&cfg);
        let s = &f.stages[0];
        let out = s.guide(&f.h_p, &f.h_s, &f.base, false).unwrap();
        assert_eq!(out.semantic_clue.dims(), &[2, 64, 16, 64]);
        assert_eq!(out.pixel_clue.dims(), &[2, 32, 196]);
        assert_eq!(out.sr.dims(), &[2, 3, 32, 128]);
        assert_eq!(out.p.dims(), &[2, 32, 37]);
        assert_eq!(out.p_hat.dims(), &[2, 32, 37]);
        assert_eq!(out.h_hat.dims(), &[2, 16, 32, 128]);
        assert_eq!(out.h_hat.elem_count(), 2 * 64 * 16 * 64);
        assert!(values(&out.sr).iter().all(|v| (0.0..=1.0).contains(v)));

        let p = s.ctc1(&f.h_s).unwrap();
        let cs = s.project_clue(&p, false).unwrap();
        let (h_hat, sr) = s.conv_decode(&f.h_p, &f.base).unwrap();
        let cp = s.vit_clue(&h_hat).unwrap();
        let p_hat = s.ctc2(&cp).unwrap();
        for (a, b) in [(&out.p, &p), (&out.semantic_clue, &cs), (&out.sr, &sr), (&out.pixel_clue, &cp), (&out.p_hat, &p_hat)] {
            assert_eq!(max_abs_diff(a, b), 0.0);
        }
        for t in [&out.semantic_clue, &out.pixel_clue, &out.sr, &out.p, &out.p_hat] {
            assert!(values(t).iter().all(|v| v.is_finite()));
        }
        let rows = softmax_last(&out.p).unwrap().sum(2).unwrap();
        assert!(max_abs_diff(&rows, &rows.ones_like().unwrap()) < 1e-5);
    }

    #[test]
    fn clues_route_across_branches_only() {
        let cfg = ModelConfig::tiny();
        let f = fixture(&cfg);
        let s = &f.stages[0];
        let full = s.guide(&f.h_p, &f.h_s, &f.base, false).unwrap();
        let no_p = s.guide(&f.h_p.zeros_like().unwrap(), &f.h_s, &f.base, false).unwrap();
        let no_s = s.guide(&f.h_p, &f.h_s.zeros_like().unwrap(), &f.base, false).unwrap();
        assert_eq!(values(&full.semantic_clue), values(&no_p.semantic_clue));
        assert_eq!(values(&full.pixel_clue), values(&no_s.pixel_clue));
        assert!(max_abs_diff(&full.semantic_clue, &no_s.semantic_clue) > 0.0);
        assert!(max_abs_diff(&full.pixel_clue, &no_p.pixel_clue) > 0.0);
    }

    #[test]
    fn stages_are_independent() {
        let cfg = ModelConfig::tiny();
        let f = fixture(&cfg);
        let a = f.stages[0].ctc1(&f.h_s).unwrap();
        let b = f.stages[1].ctc1(&f.h_s).unwrap();
        assert!(max_abs_diff(&a, &b) > 1e-4);

        // Overwriting ctc1 leaves ctc2 untouched.
        let clue = uniform(&[2, 32, 64], -1.0, 1.0, 4);
        let before = f.stages[0].ctc2(&clue).unwrap();
        let w = f.store.param("guide1.ctc1.weight").unwrap();
        f.store.assign("guide1.ctc1.weight", &w.ones_like().unwrap()).unwrap();
        assert!(max_abs_diff(&f.stages[0].ctc1(&f.h_s).unwrap(), &a) > 0.0);
        assert_eq!(values(&f.stages[0].ctc2(&clue).unwrap()), values(&before));
    }

    #[test]
    fn projector_distinguishes_one_hot_inputs_and_hits_target_size() {
        for cfg in [ModelConfig::tiny(), ModelConfig { width: 128, height: 32, ..ModelConfig::tiny() }] {
            let mut store = ParamStore::new();
            let proj = Projector::new(&mut store.builder(5), "proj", &cfg).unwrap();
            let k = cfg.num_classes();
            let mut a = vec![-20f32; cfg.tokens * k];
            for t in 0..cfg.tokens {
                a[t * k + (t % k)] = 20.0;
            }
            let mut b = a.clone();
            b[3 * k + 3] = -20.0;
            b[3 * k + 9] = 20.0;
            let ta = Tensor::from_vec(a, (1, cfg.tokens, k), &DEVICE).unwrap();
            let tb = Tensor::from_vec(b, (1, cfg.tokens, k), &DEVICE).unwrap();
            let ca = proj.forward(&ta, false).unwrap();
            let cb = proj.forward(&tb, false).unwrap();
            assert_eq!(ca.dims(), &[1, cfg.hidden_channels, cfg.height, cfg.width]);
            assert!(max_abs_diff(&ca, &cb) > 1e-4);
        }
    }

    #[test]
    fn zero_feature_gives_positional_clue() {
        let cfg = ModelConfig::tiny();
        let f = fixture(&cfg);
        let s = &f.stages[0];
        let zero = Tensor::zeros((1, 8, 32, 128), candle_core::DType::F32, &DEVICE).unwrap();
        let c1 = s.vit_clue(&zero).unwrap();
        let c2 = s.vit_clue(&zero).unwrap();
        assert_eq!(values(&c1), values(&c2));
        let want = s.vit.pos.broadcast_add(s.vit.proj.bias.as_ref().unwrap()).unwrap().unsqueeze(0).unwrap();
        assert!(max_abs_diff(&c1, &want) < 1e-6);
    }

    #[test]
    fn ctc2_loss_reaches_the_pixel_clue() {
        // Chain rule through the ctc2 projection: dL/dclue = dL/dlogits · W.
        let cfg = ModelConfig::tiny();
        let f = fixture(&cfg);
        let s = &f.stages[0];
        let clue = candle_core::Var::from_tensor(&uniform(&[1, 32, 64], -1.0, 1.0, 6)).unwrap();
        let target = [vec![3u32, 1, 20]];
        let loss = |x: &Tensor| crate::losses::ctc_loss(x, &target).unwrap().sum_all().unwrap();
        let logits = s.ctc2(&clue).unwrap();
        let g_clue = values(loss(&logits).backward().unwrap().get(&clue).unwrap());
        let leaf = candle_core::Var::from_tensor(&logits.detach()).unwrap();
        let g_logits = values(loss(&leaf).backward().unwrap().get(&leaf).unwrap());
        let w = values(&s.ctc2.weight);
        let k = cfg.num_classes();
        let d = cfg.token_dim;
        assert!(g_clue.iter().any(|v| v.abs() > 1e-4));
        for t in 0..cfg.tokens {
            for j in 0..d {
                let want: f64 = (0..k).map(|c| g_logits[t * k + c] as f64 * w[c * d + j] as f64).sum();
                assert!((g_clue[t * d + j] as f64 - want).abs() < 1e-5, "({t},{j}): {} vs {want}", g_clue[t * d + j]);
            }
        }
    }
}
