//! Full forward pass, optimization and checkpointing.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, HostTensor, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig};
pub use train::{batch_indices, fit, Batch, LogRecord, TrainOptions, Trainer};

use candle_core::Tensor;

use crate::config::{validate_config, ModelConfig};
use crate::error::{Error, Result};
use crate::guidance::GuidanceStage;
use crate::nn::ParamStore;
use crate::rec_model::RecModel;
use crate::sr_model::SrModel;

/// Everything one forward pass produces.
///
/// `sr_images` and `p_list` hold `L + 1` entries (the last ones from the final
/// decoder and CTC head), `p_hat_list` holds `L`. The feature lists hold the
/// state entering each iteration plus the final state, `L + 1` each.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub sr_images: Vec<Tensor>,
    pub p_list: Vec<Tensor>,
    pub p_hat_list: Vec<Tensor>,
    pub pixel_features: Vec<Tensor>,
    pub semantic_features: Vec<Tensor>,
    pub semantic_clues: Vec<Tensor>,
    pub pixel_clues: Vec<Tensor>,
    /// Bicubic 2× upscale of the rectified input.
    pub base: Tensor,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.p_hat_list.len()
    }

    pub fn final_feature_p(&self) -> &Tensor {
        self.pixel_features.last().expect("trace always holds the initial feature")
    }

    pub fn final_feature_s(&self) -> &Tensor {
        self.semantic_features.last().expect("trace always holds the initial feature")
    }

    pub fn final_sr(&self) -> &Tensor {
        self.sr_images.last().expect("trace always holds the final image")
    }

    pub fn final_p(&self) -> &Tensor {
        self.p_list.last().expect("trace always holds the final distribution")
    }
}

/// Both branches plus one guidance stage per iteration, sharing one parameter store.
///
/// Parameter names: `sr.*` (with `sr.srb{i}.*` per iteration), `rec.*` (with
/// `rec.enc{i}.*`), and `guide{i}.*`, for `i` in `1..=L`.
pub struct ImageModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub sr: SrModel,
    pub rec: RecModel,
    pub guides: Vec<GuidanceStage>,
}

impl std::fmt::Debug for ImageModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageModel")
            .field("cfg", &self.cfg)
            .field("params", &self.store.total())
            .finish()
    }
}

impl ImageModel {
    /// Builds a freshly initialized model; every initial value is a function of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = validate_config(cfg)?;
        let mut store = ParamStore::new();
        let mut b = store.builder(seed);
        let sr = SrModel::new(&mut b, &cfg)?;
        let rec = RecModel::new(&mut b, &cfg)?;
        let guides = (1..=cfg.iterations)
            .map(|i| GuidanceStage::new(&mut b, &format!("guide{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, store, sr, rec, guides })
    }

    /// Parameter-name prefixes owned by iteration `i` (1-based).
    pub fn stage_prefixes(i: usize) -> [String; 3] {
        [format!("sr.srb{i}."), format!("rec.enc{i}."), format!("guide{i}.")]
    }

    /// Runs the iterative forward pass on `lr (B, C, H, W)`. In training mode
    /// batch norms use batch statistics and update their running estimates.
    pub fn forward(&self, lr: &Tensor, train: bool) -> Result<IterationTrace> {
        let cfg = &self.cfg;
        let dims = lr.dims();
        if dims.len() != 4 || dims[1..] != [cfg.channels, cfg.height, cfg.width] {
            return Err(Error::Shape(format!(
                "input {dims:?} does not match (B, {}, {}, {})",
                cfg.channels, cfg.height, cfg.width
            )));
        }
        let (rect, base) = self.sr.rectify(lr)?;
        let mut h_p = self.sr.encoder.forward(&rect)?;
        let mut h_s = self.rec.embed_tokens(lr)?;
        let l = cfg.iterations;
        let mut trace = IterationTrace {
            sr_images: Vec::with_capacity(l + 1),
            p_list: Vec::with_capacity(l + 1),
            p_hat_list: Vec::with_capacity(l),
            pixel_features: vec![h_p.clone()],
            semantic_features: vec![h_s.clone()],
            semantic_clues: Vec::with_capacity(l),
            pixel_clues: Vec::with_capacity(l),
            base: base.clone(),
        };
        for i in 0..l {
            let step = || -> Result<_> {
                let g = self.guides[i].guide(&h_p, &h_s, &base, train)?;
                let next_p = self.sr.stages[i].forward(&h_p, &g.semantic_clue, train)?;
                let next_s = self.rec.stages[i].forward(&h_s, &g.pixel_clue)?;
                Ok((g, next_p, next_s))
            };
            let (g, next_p, next_s) = step().map_err(|e| e.at_iteration(i + 1))?;
            trace.sr_images.push(g.sr);
            trace.p_list.push(g.p);
            trace.p_hat_list.push(g.p_hat);
            trace.semantic_clues.push(g.semantic_clue);
            trace.pixel_clues.push(g.pixel_clue);
            h_p = next_p;
            h_s = next_s;
            trace.pixel_features.push(h_p.clone());
            trace.semantic_features.push(h_s.clone());
        }
        let last = || -> Result<_> { Ok((self.sr.decoder.forward(&h_p, &base)?.1, self.rec.ctc_head(&h_s)?)) };
        let (sr, p) = last().map_err(|e| e.at_iteration(l + 1))?;
        trace.sr_images.push(sr);
        trace.p_list.push(p);
        Ok(trace)
    }
}
