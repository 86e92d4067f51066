//! Gradient-profile loss, CTC loss and the exponentially weighted objective.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::IterationTrace;
use crate::text::ctc_min_frames;
use crate::DEVICE;

/// `0.5 · (mean |∂x sr − ∂x hr| + mean |∂y sr − ∂y hr|)` with forward
/// differences over valid positions, averaged over batch and channels.
pub fn gradient_profile_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    if sr.dims() != hr.dims() || sr.rank() != 4 {
        return Err(Error::Shape(format!("sr {:?} vs hr {:?}", sr.dims(), hr.dims())));
    }
    let (_, _, h, w) = sr.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("{h}x{w} image has no interior differences")));
    }
    let d = (sr - hr)?;
    // Differencing is linear, so differencing sr - hr gives the difference of gradients.
    let dx = (d.narrow(3, 1, w - 1)? - d.narrow(3, 0, w - 1)?)?;
    let dy = (d.narrow(2, 1, h - 1)? - d.narrow(2, 0, h - 1)?)?;
    Ok(((dx.abs()?.mean_all()? + dy.abs()?.mean_all()?)? * 0.5)?)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-space CTC lattice for one sequence.
struct Lattice {
    /// `(T, K)` log-probabilities.
    logp: Vec<f64>,
    /// Blank-augmented label: blank, l1, blank, l2, ..., blank.
    ext: Vec<usize>,
    t: usize,
    k: usize,
}

impl Lattice {
    fn new(logits: &[f32], t: usize, k: usize, target: &[u32]) -> Self {
        let mut logp = vec![0f64; t * k];
        for f in 0..t {
            let row = &logits[f * k..(f + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                logp[f * k + c] = row[c] as f64 - lse;
            }
        }
        let mut ext = vec![0usize; 2 * target.len() + 1];
        for (i, &c) in target.iter().enumerate() {
            ext[2 * i + 1] = c as usize;
        }
        Self { logp, ext, t, k }
    }

    fn can_skip(&self, s: usize) -> bool {
        s >= 2 && self.ext[s] != 0 && self.ext[s] != self.ext[s - 2]
    }

    /// `alpha[t][s]`: log-probability of the prefix up to frame t ending in state s.
    fn alpha(&self) -> Vec<f64> {
        let (t, n) = (self.t, self.ext.len());
        let mut a = vec![f64::NEG_INFINITY; t * n];
        a[0] = self.logp[self.ext[0]];
        if n > 1 {
            a[1] = self.logp[self.ext[1]];
        }
        for f in 1..t {
            for s in 0..n {
                let mut v = a[(f - 1) * n + s];
                if s >= 1 {
                    v = log_add(v, a[(f - 1) * n + s - 1]);
                }
                if self.can_skip(s) {
                    v = log_add(v, a[(f - 1) * n + s - 2]);
                }
                a[f * n + s] = v + self.logp[f * self.k + self.ext[s]];
            }
        }
        a
    }

    /// `beta[t][s]`: log-probability of frames after t given state s at t.
    fn beta(&self) -> Vec<f64> {
        let (t, n) = (self.t, self.ext.len());
        let mut b = vec![f64::NEG_INFINITY; t * n];
        b[(t - 1) * n + n - 1] = 0.0;
        if n > 1 {
            b[(t - 1) * n + n - 2] = 0.0;
        }
        for f in (0..t - 1).rev() {
            for s in 0..n {
                let next = |s2: usize| b[(f + 1) * n + s2] + self.logp[(f + 1) * self.k + self.ext[s2]];
                let mut v = next(s);
                if s + 1 < n {
                    v = log_add(v, next(s + 1));
                }
                if s + 2 < n && self.can_skip(s + 2) {
                    v = log_add(v, next(s + 2));
                }
                b[f * n + s] = v;
            }
        }
        b
    }

    fn log_likelihood(&self, alpha: &[f64]) -> f64 {
        let n = self.ext.len();
        let last = &alpha[(self.t - 1) * n..];
        if n > 1 {
            log_add(last[n - 1], last[n - 2])
        } else {
            last[0]
        }
    }
}

/// Per-sequence negative log-likelihood over `(B, T, K)` logits, blank = 0.
struct CtcOp {
    targets: Vec<Vec<u32>>,
}

impl CtcOp {
    fn dims(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
        layout.shape().dims3()
    }
}

impl CustomOp1 for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, k) = Self::dims(layout)?;
        let data = match (storage, layout.contiguous_offsets()) {
            (CpuStorage::F32(v), Some((start, end))) => &v[start..end],
            _ => candle_core::bail!("ctc_loss expects contiguous f32 logits"),
        };
        let mut out = Vec::with_capacity(b);
        for (bi, target) in self.targets.iter().enumerate() {
            let lat = Lattice::new(&data[bi * t * k..(bi + 1) * t * k], t, k, target);
            out.push(-lat.log_likelihood(&lat.alpha()) as f32);
        }
        Ok((CpuStorage::F32(out), Shape::from(b)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, t, k) = arg.dims3()?;
        let data = arg.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let upstream = grad_res.to_vec1::<f32>()?;
        let mut grad = vec![0f32; b * t * k];
        for (bi, target) in self.targets.iter().enumerate() {
            let lat = Lattice::new(&data[bi * t * k..(bi + 1) * t * k], t, k, target);
            let (alpha, beta) = (lat.alpha(), lat.beta());
            let ll = lat.log_likelihood(&alpha);
            let n = lat.ext.len();
            let g = &mut grad[bi * t * k..(bi + 1) * t * k];
            for f in 0..t {
                // d(-log P)/dz = softmax - posterior class occupancy.
                let mut occ = vec![0f64; k];
                for s in 0..n {
                    let v = alpha[f * n + s] + beta[f * n + s] - ll;
                    if v > f64::NEG_INFINITY {
                        occ[lat.ext[s]] += v.exp();
                    }
                }
                for c in 0..k {
                    let p = lat.logp[f * k + c].exp();
                    g[f * k + c] = (upstream[bi] as f64 * (p - occ[c])) as f32;
                }
            }
        }
        Ok(Some(Tensor::from_vec(grad, (b, t, k), &DEVICE)?))
    }
}

/// CTC negative log-likelihood per sequence, `(B,)`, for logits `(B, T, K)`
/// normalized internally by a softmax over the class axis. Class 0 is the blank.
pub fn ctc_loss(logits: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (b, t, k) = logits.dims3()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for a batch of {b}", targets.len())));
    }
    for target in targets {
        if let Some(&c) = target.iter().find(|&&c| c == 0 || c as usize >= k) {
            return Err(Error::Label(format!("class index {c} is not a character class")));
        }
        let need = ctc_min_frames(target);
        if need > t {
            return Err(Error::Label(format!("target needs {need} frames but only {t} are available")));
        }
    }
    Ok(logits.contiguous()?.apply_op1(CtcOp {
        targets: targets.to_vec(),
    })?)
}

/// One weighted summand of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    /// `sr` for SR images, `p` for recognizer distributions, `p_hat` for the pixel-clue distributions.
    pub name: String,
    pub index: usize,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sr_loss: f64,
    pub rec_loss: f64,
    pub total: f64,
    pub per_term: Vec<LossTerm>,
}

fn terms(name: &str, values: &[f64]) -> Vec<LossTerm> {
    values
        .iter()
        .enumerate()
        .map(|(j, &value)| LossTerm {
            name: name.to_string(),
            index: j + 1,
            weight: 2f64.powi(j as i32 + 1),
            value,
        })
        .collect()
}

/// Terms `2^i · GP(I_i)` for `i = 1..=values.len()`.
pub fn sr_terms(values: &[f64]) -> Vec<LossTerm> {
    terms("sr", values)
}

/// Terms `2^i · CTC(p_i)` for `i = 1..=L+1` followed by `2^i · CTC(p̂_i)` for `i = 1..=L`.
pub fn rec_terms(p: &[f64], p_hat: &[f64]) -> Result<Vec<LossTerm>> {
    if p.len() != p_hat.len() + 1 {
        return Err(Error::Shape(format!(
            "{} recognizer terms need {} pixel-clue terms, got {}",
            p.len(),
            p.len().saturating_sub(1),
            p_hat.len()
        )));
    }
    let mut t = terms("p", p);
    t.extend(terms("p_hat", p_hat));
    Ok(t)
}

pub fn weighted_sum(terms: &[LossTerm]) -> f64 {
    terms.iter().map(|t| t.weight * t.value).sum()
}

impl LossReport {
    pub fn from_terms(sr: Vec<LossTerm>, rec: Vec<LossTerm>) -> Self {
        let sr_loss = weighted_sum(&sr);
        let rec_loss = weighted_sum(&rec);
        let mut per_term = sr;
        per_term.extend(rec);
        Self {
            sr_loss,
            rec_loss,
            total: sr_loss + rec_loss,
            per_term,
        }
    }

    /// First term whose value is NaN or infinite, if any.
    pub fn first_non_finite(&self) -> Option<&LossTerm> {
        self.per_term.iter().find(|t| !t.value.is_finite())
    }
}

/// Differentiable objective plus its breakdown.
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn weigh(parts: &[Tensor], terms: &[LossTerm]) -> Result<Tensor> {
    let mut acc = Tensor::zeros((), candle_core::DType::F32, &DEVICE)?;
    for (part, term) in parts.iter().zip(terms) {
        acc = (acc + (part * term.weight)?)?;
    }
    Ok(acc)
}

fn sr_parts(trace: &IterationTrace, hr: &Tensor) -> Result<(Vec<Tensor>, Vec<LossTerm>)> {
    let parts = trace
        .sr_images
        .iter()
        .map(|sr| gradient_profile_loss(sr, hr))
        .collect::<Result<Vec<_>>>()?;
    let values = parts.iter().map(scalar).collect::<Result<Vec<_>>>()?;
    Ok((parts, sr_terms(&values)))
}

fn rec_parts(trace: &IterationTrace, targets: &[Vec<u32>]) -> Result<(Vec<Tensor>, Vec<LossTerm>)> {
    let parts = trace
        .p_list
        .iter()
        .chain(&trace.p_hat_list)
        .map(|logits| ctc_loss(logits, targets)?.mean_all().map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let values = parts.iter().map(scalar).collect::<Result<Vec<_>>>()?;
    let (p, p_hat) = values.split_at(trace.p_list.len());
    Ok((parts, rec_terms(p, p_hat)?))
}

fn check_census(trace: &IterationTrace) -> Result<()> {
    let l = trace.p_hat_list.len();
    if trace.sr_images.len() != l + 1 || trace.p_list.len() != l + 1 {
        return Err(Error::Shape(format!(
            "trace holds {} SR images, {} p and {} p_hat",
            trace.sr_images.len(),
            trace.p_list.len(),
            l
        )));
    }
    Ok(())
}

/// `Σ_{i=1}^{L+1} 2^i · GP(I_i^SR, hr)`, batch-averaged.
pub fn sr_loss(trace: &IterationTrace, hr: &Tensor) -> Result<(Tensor, Vec<LossTerm>)> {
    check_census(trace)?;
    let (parts, terms) = sr_parts(trace, hr)?;
    Ok((weigh(&parts, &terms)?, terms))
}

/// `Σ_{i=1}^{L+1} 2^i · CTC(p_i) + Σ_{i=1}^{L} 2^i · CTC(p̂_i)`, batch-averaged.
pub fn rec_loss(trace: &IterationTrace, targets: &[Vec<u32>]) -> Result<(Tensor, Vec<LossTerm>)> {
    check_census(trace)?;
    let (parts, terms) = rec_parts(trace, targets)?;
    Ok((weigh(&parts, &terms)?, terms))
}

pub fn total_loss(trace: &IterationTrace, hr: &Tensor, targets: &[Vec<u32>]) -> Result<Objective> {
    let (sr, sr_t) = sr_loss(trace, hr)?;
    let (rec, rec_t) = rec_loss(trace, targets)?;
    Ok(Objective {
        total: (sr + rec)?,
        report: LossReport::from_terms(sr_t, rec_t),
    })
}
