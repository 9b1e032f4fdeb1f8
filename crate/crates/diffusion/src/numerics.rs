//! Loss functions, noise schedules, rectified flow and guidance arithmetic.
//!
//! Every loss reduces by the mean over elements and returns its analytic
//! gradient next to the value. Sums run in a fixed sequential order so the
//! results are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("mask value {0} is not 0 or 1")]
    NonBinaryMask(f64),
    #[error("target label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("row {row} of the probabilities sums to {sum}")]
    NotNormalized { row: usize, sum: f64 },
    #[error("{0}")]
    OutOfRange(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::ShapeMismatch {
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(NumericsError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Variance schedule `β_1..β_T` with cumulative products `ᾱ_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(NumericsError::InvalidSchedule("no steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(NumericsError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas spaced linearly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for `t` in `0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.betas.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(NumericsError::OutOfRange(format!(
                "step {t} outside schedule of {} steps",
                self.betas.len()
            ))),
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·noise`.
pub fn forward_noise(z0: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(noise, |z, n| a * z + b * n)
}

/// Straight path `(1−t)·z0 + t·eps`.
pub fn rf_interpolate(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(NumericsError::OutOfRange(format!("flow time {t} outside [0, 1]")));
    }
    z0.zip_map(eps, |z, e| (1.0 - t) * z + t * e)
}

/// Velocity `eps − z0`, constant along the path.
pub fn rf_velocity_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.zip_map(z0, |e, z| e - z)
}

/// Flow times `1 = t_0 > t_1 > … > t_steps = 0`.
pub fn euler_times(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// Integrates `dz/dt = v(z, t)` from `t = 1` down to `t = 0` with `steps`
/// Euler steps.
pub fn euler_integrate(z1: &Tensor, steps: usize, mut velocity: impl FnMut(&Tensor, f64) -> Tensor) -> Result<Tensor> {
    if steps == 0 {
        return Err(NumericsError::OutOfRange("at least one sampling step".into()));
    }
    let times = euler_times(steps);
    let mut z = z1.clone();
    for w in times.windows(2) {
        let v = velocity(&z, w[0]);
        same_shape(&z, &v)?;
        let dt = w[0] - w[1];
        for (zi, vi) in z.data.iter_mut().zip(&v.data) {
            *zi -= dt * vi;
        }
    }
    Ok(z)
}

/// `pred_uncond + s·(pred_cond − pred_uncond)`.
pub fn cfg_combine(pred_cond: &Tensor, pred_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    pred_cond.zip_map(pred_uncond, |c, u| u + scale * (c - u))
}

/// Which frames of a clip are clean context (held fixed, excluded from the
/// loss) and which are generated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMask {
    clean: Vec<bool>,
}

impl FrameMask {
    pub fn all_generated(frames: usize) -> Self {
        Self {
            clean: vec![false; frames],
        }
    }

    pub fn from_flags(clean: Vec<bool>) -> Self {
        Self { clean }
    }

    pub fn frames(&self) -> usize {
        self.clean.len()
    }

    pub fn is_clean(&self, frame: usize) -> bool {
        self.clean[frame]
    }

    pub fn clean_count(&self) -> usize {
        self.clean.iter().filter(|c| **c).count()
    }

    pub fn generated_count(&self) -> usize {
        self.frames() - self.clean_count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.clean
    }
}

/// First `k` of `frames` frames are clean.
pub fn first_k_mask(frames: usize, k: usize) -> Result<FrameMask> {
    if k > frames {
        return Err(NumericsError::OutOfRange(format!("k = {k} exceeds {frames} frames")));
    }
    Ok(FrameMask {
        clean: (0..frames).map(|f| f < k).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedLossParams {
    pub gamma: f64,
}

impl Default for MaskedLossParams {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

impl MaskedLossParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(NumericsError::OutOfRange(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemLossParams {
    /// KL weight.
    pub alpha: f64,
    /// Lovász weight.
    pub beta: f64,
}

impl Default for SemLossParams {
    fn default() -> Self {
        Self { alpha: 1e-6, beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub grad: Tensor,
    /// Mean squared error over foreground elements (0 if there are none).
    pub fg_mse: f64,
    /// Mean squared error over background elements (0 if there are none).
    pub bg_mse: f64,
}

/// Maps each element of `shape` to its element in a broadcast `mask_shape`.
fn broadcast_offsets(shape: &[usize], mask_shape: &[usize]) -> Result<Vec<usize>> {
    let compatible = shape.len() == mask_shape.len()
        && shape.iter().zip(mask_shape).all(|(&s, &m)| m == s || m == 1);
    if !compatible {
        return Err(NumericsError::ShapeMismatch {
            left: shape.to_vec(),
            right: mask_shape.to_vec(),
        });
    }
    let rank = shape.len();
    let mut mask_strides = vec![0usize; rank];
    let mut acc = 1;
    for a in (0..rank).rev() {
        mask_strides[a] = if mask_shape[a] == 1 { 0 } else { acc };
        acc *= mask_shape[a];
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&mask_strides).map(|(i, s)| i * s).sum());
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(out)
}

/// `mean(e² + γ·(M⊙e)²)`; `mask` broadcasts over axes where it has size 1.
pub fn masked_diffusion_loss(e: &Tensor, mask: &Tensor, params: MaskedLossParams) -> Result<MaskedLoss> {
    let frames = e.shape().first().copied().unwrap_or(1);
    masked_diffusion_loss_frames(e, mask, params, &FrameMask::all_generated(frames))
}

/// As [`masked_diffusion_loss`] over the generated frames only (leading
/// axis of `e`). Clean frames get zero gradient and the mean runs over the
/// generated elements.
pub fn masked_diffusion_loss_frames(
    e: &Tensor,
    mask: &Tensor,
    params: MaskedLossParams,
    frames: &FrameMask,
) -> Result<MaskedLoss> {
    if let Some(&m) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(NumericsError::NonBinaryMask(m));
    }
    let offsets = broadcast_offsets(e.shape(), mask.shape())?;
    let f = e.shape().first().copied().unwrap_or(1);
    if frames.frames() != f {
        return Err(NumericsError::ShapeMismatch {
            left: vec![f],
            right: vec![frames.frames()],
        });
    }
    let per_frame = if f == 0 { 0 } else { e.len() / f };
    let n = per_frame * frames.generated_count();
    let gamma = params.gamma;
    let mut grad = Tensor::zeros(e.shape());
    let (mut total, mut fg, mut bg) = (0.0, 0.0, 0.0);
    let (mut n_fg, mut n_bg) = (0usize, 0usize);
    for (i, (&v, &off)) in e.data().iter().zip(&offsets).enumerate() {
        if frames.is_clean(i / per_frame) {
            continue;
        }
        let m = mask.data()[off];
        let sq = v * v;
        total += sq + gamma * m * sq;
        grad.data[i] = 2.0 * v * (1.0 + gamma * m) / n as f64;
        if m == 1.0 {
            fg += sq;
            n_fg += 1;
        } else {
            bg += sq;
            n_bg += 1;
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    Ok(MaskedLoss {
        value: mean(total, n),
        grad,
        fg_mse: mean(fg, n_fg),
        bg_mse: mean(bg, n_bg),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, l] => Ok((*n, *l)),
        s => Err(NumericsError::ShapeMismatch {
            left: s.to_vec(),
            right: vec![0, 0],
        }),
    }
}

fn check_targets(targets: &[usize], n: usize, classes: usize) -> Result<()> {
    if targets.len() != n {
        return Err(NumericsError::ShapeMismatch {
            left: vec![n],
            right: vec![targets.len()],
        });
    }
    if let Some(&label) = targets.iter().find(|&&t| t >= classes) {
        return Err(NumericsError::InvalidLabel { label, classes });
    }
    Ok(())
}

/// Mean negative log-softmax of the target class over `(N, L)` logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<LossGrad> {
    let (n, l) = rows(logits)?;
    check_targets(targets, n, l)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits.data()[r * l..(r + 1) * l];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        total += log_z - row[target];
        let g = &mut grad.data[r * l..(r + 1) * l];
        for (c, gc) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gc = (p - (c == target) as u8 as f64) / n as f64;
        }
    }
    Ok(LossGrad {
        value: if n == 0 { 0.0 } else { total / n as f64 },
        grad,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlLoss {
    pub value: f64,
    pub grad_mu: Tensor,
    pub grad_logvar: Tensor,
}

/// `mean(½(μ² + e^{logvar} − 1 − logvar))`, the KL divergence of
/// `N(μ, e^{logvar})` from the standard normal per element.
pub fn kl_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<KlLoss> {
    same_shape(mu, logvar)?;
    let n = mu.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad_mu = Tensor::zeros(mu.shape());
    let mut grad_logvar = Tensor::zeros(mu.shape());
    for i in 0..mu.len() {
        let (m, lv) = (mu.data[i], logvar.data[i]);
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        grad_mu.data[i] = m / n;
        grad_logvar.data[i] = 0.5 * (lv.exp() - 1.0) / n;
    }
    Ok(KlLoss {
        value: total / n,
        grad_mu,
        grad_logvar,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order; `gt_sorted` are the matching
/// membership flags.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|g| **g).count() as f64;
    let mut inter_cum = 0.0;
    let mut union_cum = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                inter_cum += 1.0;
            } else {
                union_cum += 1.0;
            }
            let jaccard = 1.0 - (gts - inter_cum) / (gts + union_cum);
            let step = jaccard - prev;
            prev = jaccard;
            step
        })
        .collect()
}

/// Lovász-softmax over `(N, L)` class probabilities, averaged over the
/// classes present in `targets`. Zero when `N = 0`.
pub fn lovasz_softmax(probs: &Tensor, targets: &[usize]) -> Result<LossGrad> {
    let (n, l) = rows(probs)?;
    check_targets(targets, n, l)?;
    for r in 0..n {
        let sum: f64 = probs.data()[r * l..(r + 1) * l].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NumericsError::NotNormalized { row: r, sum });
        }
    }
    lovasz_jaccard(probs, targets)
}

/// The Lovász extension of the per-class Jaccard loss over `(N, L)` scores
/// in `[0, 1]`, without requiring rows to sum to one. This is the function
/// [`lovasz_softmax`] evaluates once its input has been validated.
pub fn lovasz_jaccard(probs: &Tensor, targets: &[usize]) -> Result<LossGrad> {
    let (n, l) = rows(probs)?;
    check_targets(targets, n, l)?;
    let mut grad = Tensor::zeros(probs.shape());
    let present: Vec<usize> = (0..l).filter(|c| targets.contains(c)).collect();
    if present.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let weight = 1.0 / present.len() as f64;
    let mut total = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for &c in &present {
        let member = |i: usize| targets[i] == c;
        let error = |i: usize| {
            let p = probs.data()[i * l + c];
            if member(i) {
                1.0 - p
            } else {
                p
            }
        };
        order.sort_by(|&a, &b| error(b).total_cmp(&error(a)).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| member(i)).collect();
        let g = lovasz_grad(&gt_sorted);
        for (k, &i) in order.iter().enumerate() {
            total += error(i) * g[k];
            // d error / d p is -1 for members, +1 otherwise
            let sign = if member(i) { -1.0 } else { 1.0 };
            grad.data[i * l + c] += weight * sign * g[k];
        }
    }
    Ok(LossGrad {
        value: total * weight,
        grad,
    })
}

/// Row-wise softmax of `(N, L)` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, l) = rows(logits)?;
    let mut out = logits.clone();
    for r in 0..n {
        let row = &mut out.data[r * l..(r + 1) * l];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemLoss {
    pub value: f64,
    pub cross_entropy: f64,
    pub kl: f64,
    pub lovasz: f64,
    pub grad_logits: Tensor,
    pub grad_mu: Tensor,
    pub grad_logvar: Tensor,
}

/// `CE(logits) + α·KL(μ, logvar) + β·Lovász(softmax(logits))` for a
/// semantic-grid tokenizer, with gradients chained through the softmax.
pub fn semantic_grid_loss(
    logits: &Tensor,
    targets: &[usize],
    mu: &Tensor,
    logvar: &Tensor,
    params: SemLossParams,
) -> Result<SemLoss> {
    let ce = cross_entropy(logits, targets)?;
    let kl = kl_standard_normal(mu, logvar)?;
    let probs = softmax_rows(logits)?;
    let lov = lovasz_softmax(&probs, targets)?;
    let (n, l) = rows(logits)?;
    let mut grad_logits = ce.grad.clone();
    for r in 0..n {
        let p = &probs.data()[r * l..(r + 1) * l];
        let gp = &lov.grad.data()[r * l..(r + 1) * l];
        let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
        for c in 0..l {
            grad_logits.data[r * l + c] += params.beta * p[c] * (gp[c] - dot);
        }
    }
    Ok(SemLoss {
        value: ce.value + params.alpha * kl.value + params.beta * lov.value,
        cross_entropy: ce.value,
        kl: kl.value,
        lovasz: lov.value,
        grad_logits,
        grad_mu: kl.grad_mu.map(|g| params.alpha * g),
        grad_logvar: kl.grad_logvar.map(|g| params.alpha * g),
    })
}
