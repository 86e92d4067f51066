//! Analytic multiply-accumulate counts, parameter census and latency.

use std::time::Instant;

use candle_core::Tensor;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::pipeline::ImageModel;
use crate::sr_model::LOC_GRID;
use crate::DEVICE;

/// `k² · C_in · C_out` per output pixel.
pub fn conv_macs(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    (k * k * c_in * c_out * h_out * w_out) as u64
}

pub fn conv_params(k: usize, c_in: usize, c_out: usize, bias: bool) -> u64 {
    (k * k * c_in * c_out + if bias { c_out } else { 0 }) as u64
}

/// Affine map `inp → out` applied to `tokens` vectors.
pub fn linear_macs(tokens: usize, inp: usize, out: usize) -> u64 {
    (tokens * inp * out) as u64
}

/// Non-overlapping transposed convolution: every input pixel writes an `sh × sw` block.
pub fn block_conv_transpose_macs(h_in: usize, w_in: usize, c_in: usize, c_out: usize, sh: usize, sw: usize) -> u64 {
    (h_in * w_in * c_in * c_out * sh * sw) as u64
}

/// Bidirectional GRU over `sequences` sequences of length `len`: three gates,
/// input and recurrent products, both directions.
pub fn gru_macs(sequences: usize, len: usize, inp: usize, hidden: usize) -> u64 {
    (2 * sequences * len * 3 * (inp * hidden + hidden * hidden)) as u64
}

/// q/k/v/out projections plus the score and mix products.
pub fn attention_macs(tokens: usize, dim: usize) -> u64 {
    (4 * tokens * dim * dim + 2 * tokens * tokens * dim) as u64
}

/// Attention plus the two MLP projections.
pub fn encoder_layer_macs(tokens: usize, dim: usize, mlp_ratio: usize) -> u64 {
    attention_macs(tokens, dim) + 2 * linear_macs(tokens, dim, mlp_ratio * dim)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileEntry {
    /// Parameter-name prefix of the module.
    pub module: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Profile {
    pub entries: Vec<ProfileEntry>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl Profile {
    /// Operation count with one multiply-accumulate counted as two flops.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }
}

fn decoder_macs(cfg: &ModelConfig) -> u64 {
    let (c, h, w) = (cfg.hidden_channels, cfg.height, cfg.width);
    conv_macs(3, c, c, h, w) + conv_macs(3, c / 4, cfg.channels, 2 * h, 2 * w)
}

fn projector_macs(cfg: &ModelConfig) -> u64 {
    let (mut h, mut w, mut c_in) = (1, cfg.tokens, cfg.num_classes());
    let mut total = 0;
    for &sw in &cfg.projector_width_strides {
        total += block_conv_transpose_macs(h, w, c_in, cfg.hidden_channels, 2, sw);
        h *= 2;
        w *= sw;
        c_in = cfg.hidden_channels;
    }
    total
}

/// Per-module MAC counts for one input image at the configured resolution,
/// with parameter counts taken from the model's store. Resizes, norms and
/// activations are not counted.
pub fn profile_model(model: &ImageModel) -> Profile {
    let cfg = &model.cfg;
    let (c, h, w) = (cfg.hidden_channels, cfg.height, cfg.width);
    let (m, d, k) = (cfg.tokens, cfg.token_dim, cfg.num_classes());
    let rec_patch = cfg.channels * cfg.height * cfg.rec_patch_width();
    let clue_patch = (c / 4) * cfg.hr_height() * cfg.clue_patch_width();
    let mut modules: Vec<(String, u64)> = vec![
        ("sr.stn.".into(), linear_macs(1, cfg.channels * LOC_GRID.0 * LOC_GRID.1, 6)),
        ("sr.encoder.".into(), conv_macs(3, cfg.channels, c, h, w)),
    ];
    for i in 1..=cfg.iterations {
        let srb = conv_macs(3, c, c, h, w) + conv_macs(1, 2 * c, c, h, w) + gru_macs(h, w, c, cfg.srb_hidden) + gru_macs(w, h, 2 * cfg.srb_hidden, cfg.srb_hidden);
        modules.push((format!("sr.srb{i}."), srb));
    }
    modules.push(("sr.decoder.".into(), decoder_macs(cfg)));
    modules.push(("rec.embed.".into(), linear_macs(m, rec_patch, d)));
    for i in 1..=cfg.iterations {
        let enc = cfg.encoder_depth as u64 * encoder_layer_macs(2 * m, d, cfg.mlp_ratio);
        modules.push((format!("rec.enc{i}."), enc));
    }
    modules.push(("rec.head.".into(), linear_macs(m, d, k)));
    for i in 1..=cfg.iterations {
        let guide = 2 * linear_macs(m, d, k) + projector_macs(cfg) + decoder_macs(cfg) + linear_macs(m, clue_patch, d);
        modules.push((format!("guide{i}."), guide));
    }
    let entries: Vec<ProfileEntry> = modules
        .into_iter()
        .map(|(module, macs)| ProfileEntry {
            params: model.store.count(&module) as u64,
            module: module.trim_end_matches('.').to_string(),
            macs,
        })
        .collect();
    Profile {
        total_macs: entries.iter().map(|e| e.macs).sum(),
        total_params: entries.iter().map(|e| e.params).sum(),
        entries,
    }
}

/// Median wall-clock milliseconds of `runs` inference passes on one mid-gray
/// image, after one untimed warm-up pass.
pub fn measure_latency(model: &ImageModel, runs: usize) -> Result<f64> {
    let cfg = &model.cfg;
    let x = Tensor::full(0.5f32, (1, cfg.channels, cfg.height, cfg.width), &DEVICE)?;
    model.forward(&x, false)?;
    let mut times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            model.forward(&x, false)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Conv2d, Linear, ParamStore};

    #[test]
    fn counting_examples() {
        assert_eq!(linear_macs(2, 4, 3), 24);
        assert_eq!(conv_macs(3, 2, 4, 8, 8), 4608);
        assert_eq!(conv_params(3, 2, 4, true), 76);
        let mut store = ParamStore::new();
        let mut b: Builder = store.builder(0);
        Conv2d::new(&mut b, "conv", 2, 4, 3, true).unwrap();
        Linear::new(&mut b, "fc", 4, 3).unwrap();
        assert_eq!(store.count("conv."), 76);
        assert_eq!(store.count("fc."), 15);
    }

    #[test]
    fn totals_are_sums_and_cover_every_parameter() {
        let model = ImageModel::new(ModelConfig::tiny(), 0).unwrap();
        let p = profile_model(&model);
        assert_eq!(p.total_macs, p.entries.iter().map(|e| e.macs).sum::<u64>());
        assert_eq!(p.total_params, model.store.total() as u64);
        assert_eq!(p.total_flops(), 2 * p.total_macs);
        assert!(p.entries.iter().all(|e| e.macs > 0 && e.params > 0));
    }
}
