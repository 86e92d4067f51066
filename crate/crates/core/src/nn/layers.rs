use candle_core::{Tensor, Var, D};

use super::ops;
use super::params::{Builder, Init};
use crate::error::Result;

fn uniform_fan_in(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f32).sqrt())
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, inp: usize, out: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[out, inp], uniform_fan_in(inp))?,
                bias: Some(b.param("bias", &[out], uniform_fan_in(inp))?),
            })
        })
    }

    pub fn with_init(b: &mut Builder, name: &str, inp: usize, out: usize, weight: Init, bias: Init) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[out, inp], weight)?,
                bias: Some(b.param("bias", &[out], bias)?),
            })
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / inp;
        let mut y = x.reshape((rows, inp))?.matmul(&self.weight.t()?)?;
        if let Some(bias) = &self.bias {
            y = ops::add_bias(&y, bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_features();
        Ok(y.reshape(out_dims)?)
    }
}

/// Stride-1, same-padded square convolution over `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, inp: usize, out: usize, kernel: usize, bias: bool) -> Result<Self> {
        let init = uniform_fan_in(inp * kernel * kernel);
        Self::with_init(b, name, inp, out, kernel, init, bias.then_some(init))
    }

    /// `bias: None` builds a convolution without bias.
    pub fn with_init(b: &mut Builder, name: &str, inp: usize, out: usize, kernel: usize, weight: Init, bias: Option<Init>) -> Result<Self> {
        b.scope(name, |b| {
            let weight = b.param("weight", &[out, inp, kernel, kernel], weight)?;
            let bias = if let Some(init) = bias {
                Some(b.param("bias", &[out], init)?)
            } else {
                None
            };
            Ok(Self { weight, bias, kernel })
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let o = self.out_channels();
        let k = self.kernel;
        let cols = if k == 1 {
            x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?
        } else {
            ops::unfold(x, k)?
        };
        let mut y = self.weight.reshape((o, c * k * k))?.matmul(&cols)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.reshape((o, 1))?)?;
        }
        Ok(y.reshape((o, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

/// Transposed convolution whose kernel equals its stride, so output blocks never overlap.
/// Each input pixel expands into one `sh × sw` block. No bias: it always feeds a batch norm.
#[derive(Debug, Clone)]
pub struct BlockConvTranspose {
    /// `(C_in, C_out, sh, sw)`.
    pub weight: Tensor,
}

impl BlockConvTranspose {
    pub fn new(b: &mut Builder, name: &str, inp: usize, out: usize, sh: usize, sw: usize) -> Result<Self> {
        let weight = b.scope(name, |b| b.param("weight", &[inp, out, sh, sw], uniform_fan_in(inp)))?;
        Ok(Self { weight })
    }

    pub fn stride(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[2], d[3])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let d = self.weight.dims();
        let (o, sh, sw) = (d[1], d[2], d[3]);
        let y = x
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b * h * w, c))?
            .matmul(&self.weight.reshape((c, o * sh * sw))?)?;
        Ok(y.reshape((b, h, w, o, sh, sw))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, o, h * sh, w * sw))?)
    }
}

/// Batch normalization over `(B, ·, H, W)` with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gamma: b.param("gamma", &[channels], Init::Ones)?,
                beta: b.param("beta", &[channels], Init::Zeros)?,
                running_mean: b.buffer("running_mean", &[channels], Init::Zeros)?,
                running_var: b.buffer("running_var", &[channels], Init::Ones)?,
                momentum: 0.1,
                eps: 1e-5,
            })
        })
    }

    /// In training mode normalizes with batch statistics and updates the running
    /// estimates; otherwise uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if train {
            let x = x.contiguous()?;
            let (mean, var) = ops::channel_stats(&x.flatten_all()?.to_vec1::<f32>()?, (b, c, h, w));
            let n = (b * h * w) as f64;
            let m = self.momentum;
            let unbiased = n / (n - 1.0).max(1.0);
            let blend = |old: &Var, new: Vec<f32>| -> Result<()> {
                let new = Tensor::from_vec(new, c, x.device())?;
                Ok(old.set(&(old.as_tensor().affine(1.0 - m, 0.0)? + new.affine(m, 0.0)?)?)?)
            };
            blend(&self.running_mean, mean.iter().map(|&v| v as f32).collect())?;
            blend(&self.running_var, var.iter().map(|&v| (v * unbiased) as f32).collect())?;
            return Ok(ops::batch_norm_train(&x, &self.gamma, &self.beta, self.eps)?);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gamma: b.param("gamma", &[dim], Init::Ones)?,
                beta: b.param("beta", &[dim], Init::Zeros)?,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// One direction of a GRU layer (PyTorch gate layout: r, z, n).
#[derive(Debug, Clone)]
struct GruDirection {
    input: Linear,
    w_hh: Tensor,
    b_hh: Tensor,
    reverse: bool,
}

impl GruDirection {
    fn new(b: &mut Builder, name: &str, inp: usize, hidden: usize, reverse: bool) -> Result<Self> {
        let init = uniform_fan_in(hidden);
        b.scope(name, |b| {
            Ok(Self {
                input: Linear::with_init(b, "ih", inp, 3 * hidden, init, init)?,
                w_hh: b.param("w_hh", &[3 * hidden, hidden], init)?,
                b_hh: b.param("b_hh", &[3 * hidden], init)?,
                reverse,
            })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gx = self.input.forward(x)?;
        Ok(ops::gru_scan(&gx, &self.w_hh, &self.b_hh, self.reverse)?)
    }
}

/// Bidirectional GRU over `(N, T, in)` → `(N, T, 2·hidden)`.
#[derive(Debug, Clone)]
pub struct BiGru {
    forward_dir: GruDirection,
    backward_dir: GruDirection,
}

impl BiGru {
    pub fn new(b: &mut Builder, name: &str, inp: usize, hidden: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                forward_dir: GruDirection::new(b, "fwd", inp, hidden, false)?,
                backward_dir: GruDirection::new(b, "bwd", inp, hidden, true)?,
            })
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward_dir.w_hh.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.forward_dir.forward(x)?;
        let r = self.backward_dir.forward(x)?;
        Ok(Tensor::cat(&[f, r], D::Minus1)?)
    }
}

/// Multi-head self-attention over `(B, T, D)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                q: Linear::new(b, "q", dim, dim)?,
                k: Linear::new(b, "k", dim, dim)?,
                v: Linear::new(b, "v", dim, dim)?,
                out: Linear::new(b, "out", dim, dim)?,
                heads,
            })
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights `(B, heads, T, T)`; every row sums to one.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.affine(scale, 0.0)?;
        Ok(ops::softmax_last(&scores)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let attn = self.weights(x)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(&mixed)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                norm1: LayerNorm::new(b, "norm1", dim)?,
                attn: SelfAttention::new(b, "attn", dim, heads)?,
                norm2: LayerNorm::new(b, "norm2", dim)?,
                fc1: Linear::new(b, "fc1", dim, dim * mlp_ratio)?,
                fc2: Linear::new(b, "fc2", dim * mlp_ratio, dim)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Splits `(B, C, H, W)` into non-overlapping `ph × pw` patches, embeds each
/// linearly and adds a learned positional embedding: `(B, patches, D)`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: Tensor,
    pub patch: (usize, usize),
}

impl PatchEmbed {
    pub fn new(b: &mut Builder, name: &str, channels: usize, patch: (usize, usize), count: usize, dim: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                proj: Linear::new(b, "proj", channels * patch.0 * patch.1, dim)?,
                pos: b.param("pos", &[count, dim], Init::Normal(0.02))?,
                patch,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (ph, pw) = self.patch;
        if h % ph != 0 || w % pw != 0 {
            return Err(crate::Error::Shape(format!(
                "{h}x{w} input is not divisible into {ph}x{pw} patches"
            )));
        }
        let (nh, nw) = (h / ph, w / pw);
        if nh * nw != self.pos.dims()[0] {
            return Err(crate::Error::Shape(format!(
                "{} patches, expected {}",
                nh * nw,
                self.pos.dims()[0]
            )));
        }
        let patches = x
            .reshape((b, c, nh, ph, nw, pw))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, nh * nw, c * ph * pw))?;
        Ok(self.proj.forward(&patches)?.broadcast_add(&self.pos)?)
    }
}
