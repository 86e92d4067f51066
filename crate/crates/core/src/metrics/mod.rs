//! Fidelity metrics, CTC decoding, word accuracy, evaluation and profiling.

mod profile;

pub use profile::{
    attention_macs, block_conv_transpose_macs, conv_macs, conv_params, encoder_layer_macs, gru_macs, linear_macs,
    measure_latency, profile_model, Profile, ProfileEntry,
};

use std::fs;
use std::path::Path;

use candle_core::Tensor;
use serde::{Serialize, Serializer};

use crate::config::ModelConfig;
use crate::datagen::{Image, ImagePair};
use crate::error::{Error, Result};
use crate::nn::ops::{self, Interp};
use crate::pipeline::{Batch, ImageModel};
use crate::text::{decode_indices, normalize_text};

/// Value used in place of an infinite PSNR when averaging over samples.
pub const PSNR_CAP_DB: f64 = 100.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("images {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 · log10(1 / MSE)` over all channels and pixels; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean PSNR with infinite entries capped at [`PSNR_CAP_DB`], unless every entry is infinite.
pub fn mean_psnr(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    if values.iter().all(|v| v.is_infinite()) {
        return f64::INFINITY;
    }
    values.iter().map(|v| v.min(PSNR_CAP_DB)).sum::<f64>() / values.len() as f64
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let t: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM, 11×11 Gaussian window (σ = 1.5), data range 1, over
/// valid window positions, averaged over positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = ssim_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ci in 0..c {
        let pa: Vec<f64> = a.data[ci * h * w..(ci + 1) * h * w].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data[ci * h * w..(ci + 1) * h * w].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Per-frame argmax of row-major `(T, K)` scores; ties go to the lowest class.
pub fn best_path(scores: &[f32], k: usize) -> Vec<u32> {
    scores
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Best-path decoding of one `(T, K)` score matrix.
pub fn greedy_ctc_decode(scores: &[f32], cfg: &ModelConfig) -> String {
    let path = best_path(scores, cfg.num_classes());
    decode_indices(&collapse(&path, cfg.blank_index as u32), cfg)
}

/// Decodes every sequence of `(B, T, K)` logits.
pub fn greedy_decode_batch(logits: &Tensor, cfg: &ModelConfig) -> Result<Vec<String>> {
    let (b, t, k) = logits.dims3()?;
    let v = logits.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b).map(|i| greedy_ctc_decode(&v[i * t * k..(i + 1) * t * k], cfg)).collect())
}

/// Fraction of exact matches after normalizing both sides.
pub fn word_accuracy(preds: &[String], gts: &[String]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| normalize_text(p) == normalize_text(g))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Serializes non-finite values as the string `"inf"` (or `"nan"`).
fn db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else {
        s.serialize_str("inf")
    }
}

fn db_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    #[derive(Serialize)]
    struct Db(#[serde(serialize_with = "db")] f64);
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&Db(*x))?;
    }
    seq.end()
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleResult {
    pub gt: String,
    pub pred: String,
    #[serde(serialize_with = "db")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics of every intermediate output: `L + 1` entries for `p` and the SR
/// images, `L` for `p̂`.
#[derive(Debug, Clone, Serialize)]
pub struct PerIteration {
    pub p_accuracy: Vec<f64>,
    pub p_hat_accuracy: Vec<f64>,
    #[serde(serialize_with = "db_vec")]
    pub sr_psnr: Vec<f64>,
    pub sr_ssim: Vec<f64>,
}

impl PerIteration {
    pub fn accuracy_entries(&self) -> usize {
        self.p_accuracy.len() + self.p_hat_accuracy.len()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub word_accuracy: f64,
    #[serde(serialize_with = "db")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// PSNR of the bicubic 2× upscale of the LR input, the reference a trained model should beat.
    #[serde(serialize_with = "db")]
    pub bicubic_psnr_db: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SampleResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_iteration: Option<PerIteration>,
}

/// Bicubic 2× upscale clamped to `[0, 1]`.
pub fn bicubic_upscale(lr: &Image) -> Result<Image> {
    let t = lr.to_tensor()?.unsqueeze(0)?;
    let up = ops::resize(&t, 2 * lr.height, 2 * lr.width, Interp::Bicubic)?.clamp(0.0, 1.0)?;
    Image::from_tensor(&up)
}

const EVAL_BATCH: usize = 16;

fn images_of(batch: &Tensor) -> Result<Vec<Image>> {
    (0..batch.dim(0)?).map(|i| Image::from_tensor(&batch.get(i)?)).collect()
}

/// Inference-mode word accuracy of the final distribution over `dataset`.
pub fn training_accuracy(model: &ImageModel, dataset: &[ImagePair], batch_size: usize) -> Result<f64> {
    let mut preds = Vec::new();
    for chunk in dataset.chunks(batch_size.clamp(1, EVAL_BATCH)) {
        let batch = Batch::from_pairs(chunk)?;
        let trace = model.forward(&batch.lr, false)?;
        preds.extend(greedy_decode_batch(trace.final_p(), &model.cfg)?);
    }
    let gts: Vec<String> = dataset.iter().map(|p| p.label.text.clone()).collect();
    word_accuracy(&preds, &gts)
}

/// Runs inference over `dataset`. Accuracy comes from the final distribution,
/// fidelity from the final SR image. With `per_iteration`, every intermediate
/// output is scored as well. When `out_dir` is given, SR images are written as
/// `NNNNN_sr{i}.png` (final only, or every iteration) plus `report.json`.
pub fn evaluate(model: &ImageModel, dataset: &[ImagePair], out_dir: Option<&Path>, per_iteration: bool) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset {
            line: 0,
            msg: "evaluation set is empty".into(),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cfg = &model.cfg;
    let l = cfg.iterations;
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut bicubic = Vec::with_capacity(dataset.len());
    let mut p_preds: Vec<Vec<String>> = vec![Vec::new(); l + 1];
    let mut p_hat_preds: Vec<Vec<String>> = vec![Vec::new(); l];
    let mut sr_psnr: Vec<Vec<f64>> = vec![Vec::new(); l + 1];
    let mut sr_ssim: Vec<Vec<f64>> = vec![Vec::new(); l + 1];
    for (chunk_no, chunk) in dataset.chunks(EVAL_BATCH).enumerate() {
        let batch = Batch::from_pairs(chunk)?;
        let trace = model.forward(&batch.lr, false)?;
        let final_sr = images_of(trace.final_sr())?;
        let final_pred = greedy_decode_batch(trace.final_p(), cfg)?;
        for (j, pair) in chunk.iter().enumerate() {
            per_sample.push(SampleResult {
                gt: pair.label.text.clone(),
                pred: final_pred[j].clone(),
                psnr: psnr(&final_sr[j], &pair.hr)?,
                ssim: ssim(&final_sr[j], &pair.hr)?,
            });
            bicubic.push(psnr(&bicubic_upscale(&pair.lr)?, &pair.hr)?);
        }
        let wanted: Vec<usize> = if per_iteration { (0..=l).collect() } else { vec![l] };
        for &i in &wanted {
            let imgs = if i == l { final_sr.clone() } else { images_of(&trace.sr_images[i])? };
            if let Some(dir) = out_dir {
                for (j, img) in imgs.iter().enumerate() {
                    img.save_png(&dir.join(format!("{:05}_sr{}.png", chunk_no * EVAL_BATCH + j, i + 1)))?;
                }
            }
            if per_iteration {
                for (img, pair) in imgs.iter().zip(chunk) {
                    sr_psnr[i].push(psnr(img, &pair.hr)?);
                    sr_ssim[i].push(ssim(img, &pair.hr)?);
                }
                p_preds[i].extend(greedy_decode_batch(&trace.p_list[i], cfg)?);
                if i < l {
                    p_hat_preds[i].extend(greedy_decode_batch(&trace.p_hat_list[i], cfg)?);
                }
            }
        }
    }
    let gts: Vec<String> = dataset.iter().map(|p| p.label.text.clone()).collect();
    let preds: Vec<String> = per_sample.iter().map(|s| s.pred.clone()).collect();
    let n = dataset.len() as f64;
    let per_iteration = if per_iteration {
        Some(PerIteration {
            p_accuracy: p_preds.iter().map(|p| word_accuracy(p, &gts)).collect::<Result<_>>()?,
            p_hat_accuracy: p_hat_preds.iter().map(|p| word_accuracy(p, &gts)).collect::<Result<_>>()?,
            sr_psnr: sr_psnr.iter().map(|v| mean_psnr(v)).collect(),
            sr_ssim: sr_ssim.iter().map(|v| v.iter().sum::<f64>() / n).collect(),
        })
    } else {
        None
    };
    let report = EvalReport {
        word_accuracy: word_accuracy(&preds, &gts)?,
        psnr_db: mean_psnr(&per_sample.iter().map(|s| s.psnr).collect::<Vec<_>>()),
        ssim: per_sample.iter().map(|s| s.ssim).sum::<f64>() / n,
        bicubic_psnr_db: mean_psnr(&bicubic),
        n_samples: dataset.len(),
        per_sample,
        per_iteration,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn psnr_oracle(a: &Image, b: &Image) -> f64 {
        let mut s = 0.0;
        for c in 0..a.channels {
            for y in 0..a.height {
                for x in 0..a.width {
                    s += (a.at(c, y, x) as f64 - b.at(c, y, x) as f64).powi(2);
                }
            }
        }
        10.0 * (1.0 / (s / a.data.len() as f64)).log10()
    }

    /// Direct 2-D windowed sums at every valid position.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (c, h, w) = a.dims();
        let n = SSIM_WINDOW;
        let mut win = vec![vec![0f64; n]; n];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..=h - n {
                for x in 0..=w - n {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let wt = win[i][j] / total;
                            let va = a.at(ci, y + i, x + j) as f64;
                            let vb = b.at(ci, y + i, x + j) as f64;
                            ma += wt * va;
                            mb += wt * vb;
                            aa += wt * va * va;
                            bb += wt * vb * vb;
                            ab += wt * va * vb;
                        }
                    }
                    let (sa, sb, sab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    s += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                }
            }
            acc += s / ((h - n + 1) * (w - n + 1)) as f64;
        }
        acc / c as f64
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(3, 8, 8, 0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zero = Image::filled(3, 8, 8, 0.0);
        let half = Image::filled(3, 8, 8, 0.5);
        assert!((psnr(&zero, &half).unwrap() - 6.0206).abs() < 1e-3);
        let b = random_image(3, 8, 8, 1);
        assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-6);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &random_image(3, 8, 9, 2)).is_err());
    }

    #[test]
    fn psnr_aggregation_caps_infinity() {
        assert_eq!(mean_psnr(&[f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert_eq!(mean_psnr(&[f64::INFINITY, 20.0]), 60.0);
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(3, 16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let lo = Image::filled(1, 16, 16, 0.2);
        let hi = Image::filled(1, 16, 16, 0.8);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        assert!((ssim(&lo, &hi).unwrap() - want).abs() < 1e-6);
        let b = random_image(3, 16, 16, 4);
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-4);
        assert!((got - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(matches!(ssim(&random_image(3, 10, 16, 5), &random_image(3, 10, 16, 6)), Err(Error::Shape(_))));
    }

    fn one_hot_scores(path: &[u32], k: usize) -> Vec<f32> {
        path.iter().flat_map(|&c| (0..k).map(move |j| if j as u32 == c { 1.0 } else { 0.0 })).collect()
    }

    #[test]
    fn greedy_decode_examples() {
        let cfg = ModelConfig::default();
        let k = cfg.num_classes();
        assert_eq!(greedy_ctc_decode(&one_hot_scores(&[0, 1, 1, 0, 2], k), &cfg), "ab");
        assert_eq!(greedy_ctc_decode(&one_hot_scores(&[1, 0, 1], k), &cfg), "aa");
        assert_eq!(greedy_ctc_decode(&one_hot_scores(&[0, 0, 0], k), &cfg), "");
        // Ties resolve to the lowest index: a flat row decodes as blank.
        assert_eq!(greedy_ctc_decode(&vec![0.5; 2 * k], &cfg), "");
    }

    #[test]
    fn word_accuracy_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(word_accuracy(&s(&["hello", "world"]), &s(&["Hello!", "word"])).unwrap(), 0.5);
        assert_eq!(word_accuracy(&s(&["a", "b"]), &s(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(word_accuracy(&s(&[""]), &s(&["abc"])).unwrap(), 0.0);
        assert!(word_accuracy(&s(&["a"]), &s(&["a", "b"])).is_err());
    }

    proptest! {
        #[test]
        fn psnr_and_ssim_are_symmetric(seed in any::<u64>()) {
            let a = random_image(3, 12, 12, seed);
            let b = random_image(3, 12, 12, seed.wrapping_add(1));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
