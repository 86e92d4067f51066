//! Deterministic synthetic LR/HR text-image pairs and their on-disk format.

mod font;
mod words;

pub use font::{glyph, ink, ADVANCE, GLYPH_H, GLYPH_W};
pub use words::WORDS;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::text::Label;
use crate::DEVICE;

/// Planar `C × H × W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `(C, H, W)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), &DEVICE)?)
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, t.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Stacks equally sized images into `(B, C, H, W)`.
    pub fn stack<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
        let ts = images.into_iter().map(Image::to_tensor).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// 8-bit RGB PNG; values are rounded to the nearest level.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::ImageFile {
                path: path.to_path_buf(),
                msg: format!("only 3-channel images can be stored, got {}", self.channels),
            });
        }
        let (h, w) = (self.height, self.width);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| (self.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::ImageFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::ImageFile {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::new(3, h, w, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    pub blur_sigma: f32,
    pub noise_sigma: f32,
    pub downsample_factor: usize,
    /// Maximum fractional loss of foreground/background contrast, applied when rendering.
    pub contrast_jitter: f32,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            noise_sigma: 0.02,
            downsample_factor: 2,
            contrast_jitter: 0.3,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != 2 {
            return Err(Error::Config("downsample_factor must be 2".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("blur_sigma and noise_sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast_jitter) {
            return Err(Error::Config("contrast_jitter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub lr: Image,
    pub hr: Image,
    pub label: Label,
}

/// Empty border kept around the text, in HR pixels.
const MARGIN: f32 = 2.0;
/// Largest glyph-pixel size in HR pixels.
const MAX_SCALE: f32 = 3.5;
const SUPERSAMPLE: usize = 4;
/// Stream offset separating the degradation noise from the layout draws.
const NOISE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

/// Draws `text` with random scale, position and colors from `seed` onto a
/// `2H × 2W` canvas, then degrades it into the LR image.
pub fn render_pair(text: &str, seed: u64, cfg: &ModelConfig, params: &DegradeParams) -> Result<ImagePair> {
    params.validate()?;
    let label = Label::from_raw(text, cfg)?;
    let hr = render_text(&label.text, seed, cfg, params.contrast_jitter)?;
    let lr = degrade(&hr, params, seed ^ NOISE_STREAM)?;
    Ok(ImagePair { lr, hr, label })
}

fn render_text(text: &str, seed: u64, cfg: &ModelConfig, contrast_jitter: f32) -> Result<Image> {
    let (h, w) = (cfg.hr_height(), cfg.hr_width());
    let n = text.chars().count();
    let units_w = (ADVANCE * n - 1) as f32;
    let fit = ((w as f32 - 2.0 * MARGIN) / units_w).min((h as f32 - 2.0 * MARGIN) / GLYPH_H as f32);
    if fit < 1.0 {
        return Err(Error::Render(format!("{text:?} does not fit on a {h}x{w} canvas")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_hi = fit.min(MAX_SCALE);
    let s_lo = (0.7 * s_hi).max(1.0);
    let scale = if s_hi > s_lo { rng.random_range(s_lo..=s_hi) } else { s_hi };
    let (tw, th) = (units_w * scale, GLYPH_H as f32 * scale);
    let x0 = rng.random_range(MARGIN..=(w as f32 - MARGIN - tw).max(MARGIN));
    let y0 = rng.random_range(MARGIN..=(h as f32 - MARGIN - th).max(MARGIN));

    // Light text on dark or dark on light, with a per-channel tint.
    let dark_text = rng.random_bool(0.5);
    let (lo, hi): (f32, f32) = (rng.random_range(0.0..0.3), rng.random_range(0.7..1.0));
    let contrast = 1.0 - contrast_jitter * rng.random::<f32>();
    let mid = 0.5 * (lo + hi);
    let (lo, hi) = (mid - (mid - lo) * contrast, mid + (hi - mid) * contrast);
    let tint: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.05..0.05));
    let (fg, bg) = if dark_text { (lo, hi) } else { (hi, lo) };
    let fg = tint.map(|t| (fg + t).clamp(0.0, 1.0));
    let bg = tint.map(|t| (bg + t).clamp(0.0, 1.0));

    let chars: Vec<char> = text.chars().collect();
    let covered = |px: f32, py: f32| -> bool {
        let u = (px - x0) / scale;
        let v = (py - y0) / scale;
        if u < 0.0 || v < 0.0 {
            return false;
        }
        let (u, v) = (u as usize, v as usize);
        let ci = u / ADVANCE;
        ci < chars.len() && ink(chars[ci], v, u % ADVANCE)
    };
    let mut data = vec![0f32; 3 * h * w];
    let step = 1.0 / SUPERSAMPLE as f32;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * step;
                    let py = y as f32 + (sy as f32 + 0.5) * step;
                    hits += covered(px, py) as usize;
                }
            }
            let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for c in 0..3 {
                data[(c * h + y) * w + x] = bg[c] * (1.0 - cov) + fg[c] * cov;
            }
        }
    }
    Image::new(3, h, w, data)
}

/// Normalized 1-D Gaussian taps for radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f32> = (-r..=r).map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn blur(img: &Image, sigma: f32) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = img.dims();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; img.data.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[(ci * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t * img.at(ci, y, clampi(x as isize + j as isize - r, w)))
                    .sum();
            }
        }
    }
    let mut out = vec![0f32; img.data.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t * tmp[(ci * h + clampi(y as isize + j as isize - r, h)) * w + x])
                    .sum();
            }
        }
    }
    Image { data: out, ..img.clone() }
}

/// Gaussian blur (radius `ceil(3σ)`, replicated border) → 2×2 box average →
/// additive Gaussian noise drawn in planar order from `seed` → clamp to `[0, 1]`.
pub fn degrade(hr: &Image, params: &DegradeParams, seed: u64) -> Result<Image> {
    params.validate()?;
    let (c, h, w) = hr.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("{h}x{w} image cannot be halved")));
    }
    let blurred = blur(hr, params.blur_sigma);
    let (lh, lw) = (h / 2, w / 2);
    let mut data = vec![0f32; c * lh * lw];
    for ci in 0..c {
        for y in 0..lh {
            for x in 0..lw {
                let s = blurred.at(ci, 2 * y, 2 * x)
                    + blurred.at(ci, 2 * y, 2 * x + 1)
                    + blurred.at(ci, 2 * y + 1, 2 * x)
                    + blurred.at(ci, 2 * y + 1, 2 * x + 1);
                data[(ci * lh + y) * lw + x] = 0.25 * s;
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, params.noise_sigma).expect("finite sigma");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(c, lh, lw, data)
}

/// `n` pairs with words drawn from [`WORDS`]; sample `i` depends only on `(seed, i)`.
pub fn generate(n: usize, seed: u64, cfg: &ModelConfig, params: &DegradeParams) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let word = WORDS[rng.random_range(0..WORDS.len())];
            let sample_seed = rng.next_u64();
            render_pair(word, sample_seed, cfg, params)
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLine {
    lr_path: String,
    hr_path: String,
    text: String,
}

/// Writes `NNNNN_lr.png`, `NNNNN_hr.png` per pair and a `manifest.jsonl` listing them.
pub fn write_manifest(pairs: &[ImagePair], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut lines = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let line = ManifestLine {
            lr_path: format!("{i:05}_lr.png"),
            hr_path: format!("{i:05}_hr.png"),
            text: pair.label.text.clone(),
        };
        pair.lr.save_png(&dir.join(&line.lr_path))?;
        pair.hr.save_png(&dir.join(&line.hr_path))?;
        lines.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
        lines.push('\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads pairs in manifest order. A directory without a manifest is an empty dataset.
/// Line numbers in errors are 1-based.
pub fn load_dataset(dir: &Path, cfg: &ModelConfig) -> Result<Vec<ImagePair>> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Dataset { line: line_no, msg };
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let label = Label::from_raw(&rec.text, cfg).map_err(|e| at(e.to_string()))?;
        let lr = Image::load_png(&dir.join(&rec.lr_path)).map_err(|e| at(e.to_string()))?;
        let hr = Image::load_png(&dir.join(&rec.hr_path)).map_err(|e| at(e.to_string()))?;
        if lr.dims() != (cfg.channels, cfg.height, cfg.width) || hr.dims() != (cfg.channels, cfg.hr_height(), cfg.hr_width()) {
            return Err(at(format!(
                "image sizes {:?} and {:?} do not match the configured geometry",
                lr.dims(),
                hr.dims()
            )));
        }
        pairs.push(ImagePair { lr, hr, label });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_degrade() -> DegradeParams {
        DegradeParams {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            ..DegradeParams::default()
        }
    }

    #[test]
    fn render_shapes_and_determinism() {
        let cfg = ModelConfig::default();
        let p = DegradeParams::default();
        let a = render_pair("hello", 7, &cfg, &p).unwrap();
        assert_eq!(a.hr.dims(), (3, 32, 128));
        assert_eq!(a.lr.dims(), (3, 16, 64));
        let b = render_pair("hello", 7, &cfg, &p).unwrap();
        assert_eq!(a, b);
        let c = render_pair("hello", 8, &cfg, &p).unwrap();
        assert!(a.hr.data.iter().zip(&c.hr.data).any(|(x, y)| x != y));
        assert_eq!(a.label.text, "hello");
    }

    #[test]
    fn render_rejects_text_that_cannot_fit() {
        let cfg = ModelConfig::default();
        let err = render_pair(&"ab".repeat(11), 0, &cfg, &DegradeParams::default()).unwrap_err();
        assert!(matches!(err, Error::Render(_)), "{err}");
        assert!(render_pair("??", 0, &cfg, &DegradeParams::default()).is_err());
    }

    #[test]
    fn zero_degradation_is_box_average() {
        let cfg = ModelConfig::default();
        let hr = render_pair("box", 3, &cfg, &DegradeParams::default()).unwrap().hr;
        let lr = degrade(&hr, &no_degrade(), 0).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..64 {
                    let want = (hr.at(c, 2 * y, 2 * x) + hr.at(c, 2 * y, 2 * x + 1) + hr.at(c, 2 * y + 1, 2 * x) + hr.at(c, 2 * y + 1, 2 * x + 1)) * 0.25;
                    assert_eq!(lr.at(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn constants_survive_noise_free_degradation() {
        let img = Image::filled(3, 32, 128, 0.5);
        let p = DegradeParams {
            blur_sigma: 2.3,
            noise_sigma: 0.0,
            ..DegradeParams::default()
        };
        let lr = degrade(&img, &p, 5).unwrap();
        assert!(lr.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    /// Blur written as a direct 2-D sum over the separable kernel.
    fn oracle_degrade(hr: &Image, sigma: f32, noise: f32, seed: u64) -> Vec<f32> {
        let (c, h, w) = hr.dims();
        let r = (3.0 * sigma).ceil() as isize;
        let weights: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp()).collect();
        let total: f64 = weights.iter().sum();
        let idx = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let blurred = |ci: usize, y: usize, x: usize| -> f64 {
            let mut acc = 0.0;
            for (a, wy) in weights.iter().enumerate() {
                for (b, wx) in weights.iter().enumerate() {
                    let yy = idx(y as isize + a as isize - r, h);
                    let xx = idx(x as isize + b as isize - r, w);
                    acc += wy * wx * hr.at(ci, yy, xx) as f64;
                }
            }
            acc / (total * total)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, noise).unwrap();
        let mut out = Vec::new();
        for ci in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let avg = 0.25 * (blurred(ci, 2 * y, 2 * x) + blurred(ci, 2 * y, 2 * x + 1) + blurred(ci, 2 * y + 1, 2 * x) + blurred(ci, 2 * y + 1, 2 * x + 1));
                    out.push(avg as f32);
                }
            }
        }
        for v in &mut out {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
        out
    }

    #[test]
    fn degradation_matches_step_by_step_oracle() {
        let cfg = ModelConfig::default();
        let hr = render_pair("oracle", 11, &cfg, &no_degrade()).unwrap().hr;
        let p = DegradeParams {
            blur_sigma: 1.2,
            noise_sigma: 0.1,
            ..DegradeParams::default()
        };
        let got = degrade(&hr, &p, 42).unwrap();
        let want = oracle_degrade(&hr, 1.2, 0.1, 42);
        let worst = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = ModelConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate(4, 9, &cfg, &DegradeParams::default()).unwrap();
        write_manifest(&pairs, dir.path()).unwrap();
        let back = load_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.lr.data.iter().chain(&a.hr.data).zip(b.lr.data.iter().chain(&b.hr.data)) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn dataset_errors_name_the_line() {
        let cfg = ModelConfig::default();
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), &cfg).unwrap().is_empty());
        let pairs = generate(2, 1, &cfg, &DegradeParams::default()).unwrap();
        write_manifest(&pairs, dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST);
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("{\"lr_path\": \"00000_lr.png\", \"text\": \"abc\"}\n");
        fs::write(&manifest, &text).unwrap();
        match load_dataset(dir.path(), &cfg) {
            Err(Error::Dataset { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("hr_path"), "{msg}");
            }
            other => panic!("expected a dataset error, got {other:?}"),
        }
        fs::write(&manifest, "{\"lr_path\": \"00000_lr.png\", \"hr_path\": \"gone.png\", \"text\": \"abc\"}\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), &cfg), Err(Error::Dataset { line: 1, .. })));
        fs::write(&manifest, "{\"lr_path\": \"00000_lr.png\", \"hr_path\": \"00000_hr.png\", \"text\": \"?!\"}\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), &cfg), Err(Error::Dataset { line: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rendered_pairs_obey_shape_and_range(seed in any::<u64>(), word in proptest::sample::select(WORDS)) {
            let cfg = ModelConfig::default();
            let pair = render_pair(word, seed, &cfg, &DegradeParams::default()).unwrap();
            prop_assert_eq!(pair.hr.dims(), (3, 2 * pair.lr.height, 2 * pair.lr.width));
            prop_assert!(pair.lr.data.iter().chain(&pair.hr.data).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
