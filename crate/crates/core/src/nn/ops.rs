//! Host kernels that candle lacks (or lacks a fast backward for), wrapped as
//! custom ops, plus small composite helpers.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, D};

use crate::DEVICE;

type CResult<T> = candle_core::Result<T>;

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout, op: &str) -> CResult<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => bail!("{op}: expected f32 storage"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("{op}: input must be contiguous"),
    }
}

fn host(t: &Tensor) -> CResult<Vec<f32>> {
    t.flatten_all()?.to_vec1::<f32>()
}

fn dims4(l: &Layout, op: &str) -> CResult<(usize, usize, usize, usize)> {
    match l.dims() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        d => bail!("{op}: expected a rank-4 tensor, got {d:?}"),
    }
}

// ---------------------------------------------------------------------------
// im2col for stride-1 "same" convolutions

/// `(B, C, H, W)` → `(C·k·k, B·H·W)` patch matrix with zero padding `(k-1)/2`.
struct Unfold {
    k: usize,
}

/// Adjoint of [`Unfold`]: scatters a patch matrix back onto a `(B, C, H, W)` image.
struct Fold {
    k: usize,
    shape: (usize, usize, usize, usize),
}

fn unfold_kernel(x: &[f32], (b, c, h, w): (usize, usize, usize, usize), k: usize) -> Vec<f32> {
    let pad = (k - 1) / 2;
    let n = b * h * w;
    let mut out = vec![0f32; c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[(bi * h + y) * w..(bi * h + y + 1) * w];
                        let shift = kx as isize - pad as isize;
                        let x0 = (-shift).max(0) as usize;
                        let x1 = (w as isize - shift).min(w as isize) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + shift) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold_kernel(cols: &[f32], (b, c, h, w): (usize, usize, usize, usize), k: usize) -> Vec<f32> {
    let pad = (k - 1) / 2;
    let n = b * h * w;
    let mut out = vec![0f32; b * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[(bi * h + y) * w..(bi * h + y + 1) * w];
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let shift = kx as isize - pad as isize;
                        let x0 = (-shift).max(0) as usize;
                        let x1 = (w as isize - shift).min(w as isize) as usize;
                        if x0 < x1 {
                            let d0 = (x0 as isize + shift) as usize;
                            for (d, s) in drow[d0..d0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let shape = dims4(l, self.name())?;
        let x = f32_slice(s, l, self.name())?;
        let (b, c, h, w) = shape;
        let out = unfold_kernel(x, shape, self.k);
        Ok((CpuStorage::F32(out), Shape::from((c * self.k * self.k, b * h * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1(Fold { k: self.k, shape: (b, c, h, w) })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let cols = f32_slice(s, l, self.name())?;
        let (b, c, h, w) = self.shape;
        if cols.len() != c * self.k * self.k * b * h * w {
            bail!("fold: patch matrix has {} elements, expected {}", cols.len(), c * self.k * self.k * b * h * w);
        }
        let out = fold_kernel(cols, self.shape, self.k);
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold { k: self.k })?))
    }
}

/// Patch matrix of a stride-1, same-padded `k×k` convolution. `k` must be odd.
pub fn unfold(x: &Tensor, k: usize) -> CResult<Tensor> {
    if k.is_multiple_of(2) {
        bail!("unfold: kernel size must be odd, got {k}");
    }
    x.contiguous()?.apply_op1(Unfold { k })
}

// ---------------------------------------------------------------------------
// Single-direction GRU scan

/// Runs the GRU recurrence over a precomputed input projection.
///
/// Arguments: `gx` `(N, T, 3h)` (input projection plus input bias, gate order
/// r, z, n), `w_hh` `(3h, h)`, `b_hh` `(3h)`. Output: `(N, T, 5h)` holding per
/// step the hidden state, then r, z, the candidate n and the recurrent n-gate
/// term, starting from a zero state. Only the first `h` slots are part of the
/// result; the rest is the backward cache and receives no gradient. With
/// `reverse` the sequence is scanned from the last step to the first, and
/// output step `t` still corresponds to input step `t`.
struct GruScan {
    reverse: bool,
}

struct GruDims {
    n: usize,
    t: usize,
    h: usize,
}

/// Slots per step in the scan output.
const GRU_SLOTS: usize = 5;

impl GruScan {
    fn order(&self, t: usize) -> Vec<usize> {
        if self.reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        }
    }
}

#[inline]
fn sigm(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = b + w · hs` with `w_t` the `(h, 3h)` transpose of `w_hh`.
#[inline]
fn gate_matvec(w_t: &[f32], b: &[f32], hs: &[f32], out: &mut [f32]) {
    out.copy_from_slice(b);
    let cols = out.len();
    for (i, &hv) in hs.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w_t[i * cols..(i + 1) * cols]) {
            *o += hv * wv;
        }
    }
}

fn transpose(w: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0f32; w.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

impl GruScan {
    fn forward(&self, gx: &[f32], w: &[f32], b: &[f32], d: &GruDims) -> Vec<f32> {
        let GruDims { n, t, h } = *d;
        let w_t = transpose(w, 3 * h, h);
        let mut out = vec![0f32; n * t * GRU_SLOTS * h];
        let mut gh = vec![0f32; 3 * h];
        let mut state = vec![0f32; h];
        for s in 0..n {
            state.iter_mut().for_each(|v| *v = 0.0);
            for step in self.order(t) {
                gate_matvec(&w_t, b, &state, &mut gh);
                let g = &gx[(s * t + step) * 3 * h..(s * t + step + 1) * 3 * h];
                let o = &mut out[(s * t + step) * GRU_SLOTS * h..(s * t + step + 1) * GRU_SLOTS * h];
                for j in 0..h {
                    let r = sigm(g[j] + gh[j]);
                    let z = sigm(g[h + j] + gh[h + j]);
                    let nn = (g[2 * h + j] + r * gh[2 * h + j]).tanh();
                    state[j] = (1.0 - z) * nn + z * state[j];
                    o[h + j] = r;
                    o[2 * h + j] = z;
                    o[3 * h + j] = nn;
                    o[4 * h + j] = gh[2 * h + j];
                }
                o[..h].copy_from_slice(&state);
            }
        }
        out
    }

    /// `res` is the forward output with its gate cache; `dout` is `(N, T, h)`.
    fn backward(&self, res: &[f32], w: &[f32], dout: &[f32], d: &GruDims) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let GruDims { n, t, h } = *d;
        let mut dgx = vec![0f32; n * t * 3 * h];
        let mut dw = vec![0f32; 3 * h * h];
        let mut db = vec![0f32; 3 * h];
        let order = self.order(t);
        let zero = vec![0f32; h];
        let mut dh = vec![0f32; h];
        let mut dgh = vec![0f32; 3 * h];
        for s in 0..n {
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (k, &step) in order.iter().enumerate().rev() {
                let row = (s * t + step) * GRU_SLOTS * h;
                let cache = &res[row..row + GRU_SLOTS * h];
                let hp = if k == 0 {
                    &zero[..]
                } else {
                    let p = (s * t + order[k - 1]) * GRU_SLOTS * h;
                    &res[p..p + h]
                };
                let go = &dout[(s * t + step) * h..(s * t + step + 1) * h];
                let dg = &mut dgx[(s * t + step) * 3 * h..(s * t + step + 1) * 3 * h];
                for j in 0..h {
                    let dht = dh[j] + go[j];
                    let (r, z, nn, ghn) = (cache[h + j], cache[2 * h + j], cache[3 * h + j], cache[4 * h + j]);
                    let dn = dht * (1.0 - z);
                    let dz = dht * (hp[j] - nn);
                    let dn_pre = dn * (1.0 - nn * nn);
                    let dr_pre = dn_pre * ghn * r * (1.0 - r);
                    let dz_pre = dz * z * (1.0 - z);
                    dg[j] = dr_pre;
                    dg[h + j] = dz_pre;
                    dg[2 * h + j] = dn_pre;
                    dgh[j] = dr_pre;
                    dgh[h + j] = dz_pre;
                    dgh[2 * h + j] = dn_pre * r;
                    dh[j] = dht * z;
                }
                for (row, &g) in dgh.iter().enumerate() {
                    db[row] += g;
                    let wr = &w[row * h..(row + 1) * h];
                    let dwr = &mut dw[row * h..(row + 1) * h];
                    for ((dwv, dhv), (&wv, &hv)) in dwr.iter_mut().zip(dh.iter_mut()).zip(wr.iter().zip(hp)) {
                        *dwv += g * hv;
                        *dhv += g * wv;
                    }
                }
            }
        }
        (dgx, dw, db)
    }

    fn dims(gx: &[usize], w: &[usize], b: &[usize]) -> CResult<GruDims> {
        let (n, t, h3) = match gx {
            &[n, t, h3] => (n, t, h3),
            d => bail!("gru_scan: gx must be (N, T, 3h), got {d:?}"),
        };
        if h3 % 3 != 0 || w != [h3, h3 / 3] || b != [h3] {
            bail!("gru_scan: inconsistent shapes gx {gx:?}, w_hh {w:?}, b_hh {b:?}");
        }
        Ok(GruDims { n, t, h: h3 / 3 })
    }
}

impl CustomOp3 for GruScan {
    fn name(&self) -> &'static str {
        "gru_scan"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let d = Self::dims(l1.dims(), l2.dims(), l3.dims())?;
        let gx = f32_slice(s1, l1, self.name())?;
        let w = f32_slice(s2, l2, self.name())?;
        let b = f32_slice(s3, l3, self.name())?;
        let out = self.forward(gx, w, b, &d);
        Ok((CpuStorage::F32(out), Shape::from((d.n, d.t, GRU_SLOTS * d.h))))
    }

    fn bwd(
        &self,
        gx: &Tensor,
        w: &Tensor,
        b: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = Self::dims(gx.dims(), w.dims(), b.dims())?;
        let dout = host(&grad.narrow(2, 0, d.h)?)?;
        let (dgx, dw, db) = self.backward(&host(res)?, &host(w)?, &dout, &d);
        Ok((
            Some(Tensor::from_vec(dgx, gx.shape(), &DEVICE)?),
            Some(Tensor::from_vec(dw, w.shape(), &DEVICE)?),
            Some(Tensor::from_vec(db, b.shape(), &DEVICE)?),
        ))
    }
}

/// GRU hidden states for a precomputed input projection; see the op's docs for shapes.
pub fn gru_scan(gx: &Tensor, w_hh: &Tensor, b_hh: &Tensor, reverse: bool) -> CResult<Tensor> {
    let h = w_hh.dim(1)?;
    gx.contiguous()?
        .apply_op3(&w_hh.contiguous()?, &b_hh.contiguous()?, GruScan { reverse })?
        .narrow(2, 0, h)
}

// ---------------------------------------------------------------------------
// Affine resampling with bilinear interpolation and border clamping

/// Samples `image (B, C, H, W)` on the grid produced by `theta (B, 6)`, a
/// row-major 2×3 affine map over normalized coordinates in `[-1, 1]`
/// (pixel centers, `align_corners = false`). Out-of-range coordinates clamp to
/// the border, and receive no coordinate gradient there.
struct AffineSample;

struct SamplePoint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f32,
    wy: f32,
    /// Normalized output coordinates, the inputs of the affine map.
    xn: f32,
    yn: f32,
    /// False when the coordinate was clamped to the border.
    x_free: bool,
    y_free: bool,
}

fn sample_point(theta: &[f32], x: usize, y: usize, h: usize, w: usize) -> SamplePoint {
    let xn = (2 * x + 1) as f32 / w as f32 - 1.0;
    let yn = (2 * y + 1) as f32 / h as f32 - 1.0;
    let gx = theta[0] * xn + theta[1] * yn + theta[2];
    let gy = theta[3] * xn + theta[4] * yn + theta[5];
    let sx = ((gx + 1.0) * w as f32 - 1.0) / 2.0;
    let sy = ((gy + 1.0) * h as f32 - 1.0) / 2.0;
    let x_free = sx >= 0.0 && sx <= (w - 1) as f32;
    let y_free = sy >= 0.0 && sy <= (h - 1) as f32;
    let sx = sx.clamp(0.0, (w - 1) as f32);
    let sy = sy.clamp(0.0, (h - 1) as f32);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    SamplePoint {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: sx - x0 as f32,
        wy: sy - y0 as f32,
        xn,
        yn,
        x_free,
        y_free,
    }
}

impl AffineSample {
    fn check(img: &[usize], theta: &[usize]) -> CResult<(usize, usize, usize, usize)> {
        match (img, theta) {
            (&[b, c, h, w], &[tb, 6]) if tb == b => Ok((b, c, h, w)),
            _ => bail!("affine_sample: image {img:?} and theta {theta:?} are incompatible"),
        }
    }
}

impl CustomOp2 for AffineSample {
    fn name(&self) -> &'static str {
        "affine_sample"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = Self::check(l1.dims(), l2.dims())?;
        let img = f32_slice(s1, l1, self.name())?;
        let theta = f32_slice(s2, l2, self.name())?;
        let mut out = vec![0f32; b * c * h * w];
        for bi in 0..b {
            let th = &theta[bi * 6..bi * 6 + 6];
            for y in 0..h {
                for x in 0..w {
                    let p = sample_point(th, x, y, h, w);
                    for ci in 0..c {
                        let plane = &img[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        let top = (1.0 - p.wx) * plane[p.y0 * w + p.x0] + p.wx * plane[p.y0 * w + p.x1];
                        let bot = (1.0 - p.wx) * plane[p.y1 * w + p.x0] + p.wx * plane[p.y1 * w + p.x1];
                        out[((bi * c + ci) * h + y) * w + x] = (1.0 - p.wy) * top + p.wy * bot;
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }

    fn bwd(&self, image: &Tensor, theta: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = Self::check(image.dims(), theta.dims())?;
        let img = host(image)?;
        let th_all = host(theta)?;
        let g = host(grad)?;
        let mut dimg = vec![0f32; img.len()];
        let mut dth = vec![0f32; th_all.len()];
        for bi in 0..b {
            let th = &th_all[bi * 6..bi * 6 + 6];
            for y in 0..h {
                for x in 0..w {
                    let p = sample_point(th, x, y, h, w);
                    let (mut dsx, mut dsy) = (0f32, 0f32);
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let go = g[base + y * w + x];
                        let (i00, i01) = (base + p.y0 * w + p.x0, base + p.y0 * w + p.x1);
                        let (i10, i11) = (base + p.y1 * w + p.x0, base + p.y1 * w + p.x1);
                        dimg[i00] += go * (1.0 - p.wx) * (1.0 - p.wy);
                        dimg[i01] += go * p.wx * (1.0 - p.wy);
                        dimg[i10] += go * (1.0 - p.wx) * p.wy;
                        dimg[i11] += go * p.wx * p.wy;
                        dsx += go * ((1.0 - p.wy) * (img[i01] - img[i00]) + p.wy * (img[i11] - img[i10]));
                        dsy += go * ((1.0 - p.wx) * (img[i10] - img[i00]) + p.wx * (img[i11] - img[i01]));
                    }
                    let dgx = if p.x_free { dsx * w as f32 / 2.0 } else { 0.0 };
                    let dgy = if p.y_free { dsy * h as f32 / 2.0 } else { 0.0 };
                    let dt = &mut dth[bi * 6..bi * 6 + 6];
                    dt[0] += dgx * p.xn;
                    dt[1] += dgx * p.yn;
                    dt[2] += dgx;
                    dt[3] += dgy * p.xn;
                    dt[4] += dgy * p.yn;
                    dt[5] += dgy;
                }
            }
        }
        Ok((
            Some(Tensor::from_vec(dimg, image.shape(), &DEVICE)?),
            Some(Tensor::from_vec(dth, theta.shape(), &DEVICE)?),
        ))
    }
}

/// Bilinear affine warp of `image (B, C, H, W)` by `theta (B, 6)`.
pub fn affine_sample(image: &Tensor, theta: &Tensor) -> CResult<Tensor> {
    image.contiguous()?.apply_op2(&theta.contiguous()?, AffineSample)
}

// ---------------------------------------------------------------------------
// Elementwise and normalization helpers

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s, l, self.name())?;
        Ok((CpuStorage::F32(x.iter().map(|&v| sigm(v)).collect()), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let d = (res * (1.0 - res)?)?;
        Ok(Some(grad.mul(&d)?))
    }
}

pub fn sigmoid(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

/// Clamp to [0, 1] whose backward pass is the identity.
struct UnitClampPassThrough;

impl CustomOp1 for UnitClampPassThrough {
    fn name(&self) -> &'static str {
        "unit-clamp-pass-through"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = f32_slice(s, l, self.name())?;
        Ok((CpuStorage::F32(x.iter().map(|&v| v.clamp(0.0, 1.0)).collect()), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.clone()))
    }
}

/// Output is exactly within [0, 1]; gradients pass through unchanged.
pub fn unit_clamp_pass_through(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(UnitClampPassThrough)
}

/// `y (R, N) + b (N)` broadcast over rows; the bias gradient is a column sum.
struct AddBias;

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let y = f32_slice(s1, l1, self.name())?;
        let b = f32_slice(s2, l2, self.name())?;
        let n = b.len();
        if l1.dims().last() != Some(&n) || l2.dims().len() != 1 {
            bail!("add_bias: shapes {:?} and {:?}", l1.dims(), l2.dims());
        }
        let mut out = y.to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(&self, _y: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let n = b.elem_count();
        let g = host(grad)?;
        let mut db = vec![0f32; n];
        for row in g.chunks_exact(n) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        Ok((Some(grad.clone()), Some(Tensor::from_vec(db, n, &DEVICE)?)))
    }
}

/// Adds `bias` to every row along the last axis of `y`.
pub fn add_bias(y: &Tensor, bias: &Tensor) -> CResult<Tensor> {
    y.contiguous()?.apply_op2(&bias.contiguous()?, AddBias)
}

/// Per-channel mean and biased variance of `(B, C, H, W)` data, in f64.
pub fn channel_stats(x: &[f32], (b, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ci in 0..c {
        let planes = || (0..b).flat_map(move |bi| x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter());
        let m = planes().map(|&v| v as f64).sum::<f64>() / n;
        mean[ci] = m;
        var[ci] = planes().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
    }
    (mean, var)
}

/// Batch normalization with batch statistics: `x (B, C, H, W)`, `gamma (C)`, `beta (C)`.
struct BatchNormTrain {
    eps: f64,
}

impl BatchNormTrain {
    /// Per-channel `(mean, 1 / sqrt(var + eps))`.
    fn norm(&self, x: &[f32], dims: (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
        let (mean, var) = channel_stats(x, dims);
        (mean, var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect())
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = dims4(l1, self.name())?;
        let (b, c, h, w) = dims;
        let x = f32_slice(s1, l1, self.name())?;
        let gamma = f32_slice(s2, l2, self.name())?;
        let beta = f32_slice(s3, l3, self.name())?;
        if gamma.len() != c || beta.len() != c {
            bail!("batch_norm_train: {c} channels but {} / {} affine entries", gamma.len(), beta.len());
        }
        let (mean, inv) = self.norm(x, dims);
        let hw = h * w;
        let mut out = vec![0f32; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = (gamma[ci] as f64 * inv[ci]) as f32;
                let shift = (beta[ci] as f64 - mean[ci] * gamma[ci] as f64 * inv[ci]) as f32;
                let o = (bi * c + ci) * hw;
                for (dst, &v) in out[o..o + hw].iter_mut().zip(&x[o..o + hw]) {
                    *dst = v * scale + shift;
                }
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let (b, c, h, w) = dims;
        let hw = h * w;
        let n = (b * hw) as f64;
        let xv = host(x)?;
        let g = host(grad)?;
        let gamma = host(gamma)?;
        let (mean, inv) = self.norm(&xv, dims);
        let mut dx = vec![0f32; xv.len()];
        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        for ci in 0..c {
            // sum(g) and sum(g · xhat) over the channel.
            let (mut sg, mut sgx) = (0f64, 0f64);
            for bi in 0..b {
                let o = (bi * c + ci) * hw;
                for (&gv, &xv) in g[o..o + hw].iter().zip(&xv[o..o + hw]) {
                    sg += gv as f64;
                    sgx += gv as f64 * (xv as f64 - mean[ci]) * inv[ci];
                }
            }
            dbeta[ci] = sg as f32;
            dgamma[ci] = sgx as f32;
            let k = gamma[ci] as f64 * inv[ci];
            for bi in 0..b {
                let o = (bi * c + ci) * hw;
                for j in o..o + hw {
                    let xhat = (xv[j] as f64 - mean[ci]) * inv[ci];
                    dx[j] = (k * (g[j] as f64 - sg / n - xhat * sgx / n)) as f32;
                }
            }
        }
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), &DEVICE)?),
            Some(Tensor::from_vec(dgamma, c, &DEVICE)?),
            Some(Tensor::from_vec(dbeta, c, &DEVICE)?),
        ))
    }
}

/// Training-mode batch normalization; statistics are recomputed from `x`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// `(B, 4C, H, W)` → `(B, C, 2H, 2W)`. Input channel `4c + 2i + j` lands at
/// output channel `c`, row offset `i`, column offset `j`.
pub fn pixel_shuffle(x: &Tensor) -> CResult<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    if c4 % 4 != 0 {
        bail!("pixel_shuffle: channel count {c4} not divisible by 4");
    }
    let c = c4 / 4;
    x.reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))
}

// ---------------------------------------------------------------------------
// Separable resampling as dense interpolation matrices

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Bicubic,
    /// Box average over the covered input interval.
    Area,
}

fn cubic_weight(t: f32) -> f32 {
    const A: f32 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Row-major `(out, in)` matrix `R` such that resampled = `R · signal`, with
/// half-pixel centers and clamped borders.
pub fn interp_matrix(out: usize, inp: usize, mode: Interp) -> Vec<f32> {
    let mut m = vec![0f32; out * inp];
    let scale = inp as f32 / out as f32;
    for o in 0..out {
        let row = &mut m[o * inp..(o + 1) * inp];
        match mode {
            Interp::Bilinear => {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                let f = src - i0 as f32;
                row[i0] += 1.0 - f;
                row[i1] += f;
            }
            Interp::Bicubic => {
                let src = (o as f32 + 0.5) * scale - 0.5;
                let base = src.floor();
                let f = src - base;
                for k in -1..=2 {
                    let idx = (base as isize + k).clamp(0, inp as isize - 1) as usize;
                    row[idx] += cubic_weight(f - k as f32);
                }
            }
            Interp::Area => {
                let (lo, hi) = (o as f32 * scale, (o + 1) as f32 * scale);
                for (i, r) in row.iter_mut().enumerate() {
                    let overlap = (hi.min((i + 1) as f32) - lo.max(i as f32)).max(0.0);
                    *r = overlap / scale;
                }
            }
        }
    }
    m
}

/// Resizes the two trailing axes of a rank-4 tensor with separable interpolation.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: Interp) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut y = x.clone();
    if out_w != w {
        let rw = Tensor::from_vec(interp_matrix(out_w, w, mode), (out_w, w), &DEVICE)?;
        y = y.reshape((b * c * h, w))?.matmul(&rw.t()?)?.reshape((b, c, h, out_w))?;
    }
    if out_h != h {
        let rh = Tensor::from_vec(interp_matrix(out_h, h, mode), (out_h, h), &DEVICE)?;
        y = y
            .transpose(2, 3)?
            .contiguous()?
            .reshape((b * c * out_w, h))?
            .matmul(&rh.t()?)?
            .reshape((b, c, out_w, out_h))?
            .transpose(2, 3)?
            .contiguous()?;
    }
    Ok(y)
}
