//! Rectified-flow training with the foreground-weighted loss, first-k frame
//! masking and condition dropout. Plain gradient descent, single-threaded.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::Clip;
use super::feat::Feat;
use super::model::{ForwardOptions, ModelError, ToyDenoiser};
use super::params::ParamRole;
use crate::numerics::{masked_diffusion_loss_frames, FrameMask, MaskedLossParams, NumericsError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training clips")]
    NoClips,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Base, control and encoder parameters; adapters are bypassed.
    Full,
    /// Only adapter parameters, with adapters active.
    AdapterFinetune,
}

impl TrainMode {
    pub fn trainable(self) -> &'static [ParamRole] {
        match self {
            TrainMode::Full => &[ParamRole::Base, ParamRole::Control, ParamRole::Encoder],
            TrainMode::AdapterFinetune => &[ParamRole::Adapter],
        }
    }

    pub fn forward_options(self, conditions: bool) -> ForwardOptions {
        ForwardOptions {
            conditions,
            adapter: self == TrainMode::AdapterFinetune,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub gamma: f64,
    /// Probability of replacing the conditions by zeros for a step.
    pub cond_dropout: f64,
    /// Probability of holding the first frames of each view clean.
    pub first_k_prob: f64,
    /// Global gradient-norm ceiling over the trainable parameters; 0 disables.
    pub grad_clip: f64,
    /// Upper bound on the number of clean frames per view when they are held.
    pub max_first_k: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.003,
            optimizer: Optimizer::Adam,
            gamma: 2.0,
            cond_dropout: 0.1,
            first_k_prob: 0.5,
            grad_clip: 1.0,
            max_first_k: 1,
            seed: 0,
            mode: TrainMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err(format!("learning_rate {}", self.learning_rate));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return err(format!("gamma {}", self.gamma));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return err(format!("grad_clip {}", self.grad_clip));
        }
        for (name, p) in [("cond_dropout", self.cond_dropout), ("first_k_prob", self.first_k_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} {p} is not a probability"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub fg_loss: f64,
    pub bg_loss: f64,
}

/// Mean loss over the first and last `window` steps.
pub fn smoothed_endpoints(log: &[StepLog], window: usize) -> (f64, f64) {
    let w = window.clamp(1, log.len().max(1));
    let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len().max(1) as f64;
    (mean(&log[..w.min(log.len())]), mean(&log[log.len().saturating_sub(w)..]))
}

/// Per-frame clean flags for `k` clean frames at the start of every view.
pub fn clean_flags(views: usize, frames_per_view: usize, k: usize) -> FrameMask {
    FrameMask::from_flags(
        (0..views * frames_per_view)
            .map(|j| j % frames_per_view < k)
            .collect(),
    )
}

/// Noisy latent at time `t` for generated frames, clean latent elsewhere,
/// with matching per-frame times.
pub fn noisy_clip(z0: &Feat, eps: &Feat, t: f64, clean: &FrameMask) -> (Feat, Vec<f64>) {
    let mut z = z0.clone();
    let mut times = vec![0.0; z0.f];
    for (j, time) in times.iter_mut().enumerate() {
        if clean.is_clean(j) {
            continue;
        }
        *time = t;
        for (dst, &e) in z.frame_mut(j).iter_mut().zip(eps.frame(j)) {
            *dst = (1.0 - t) * *dst + t * e;
        }
    }
    (z, times)
}

pub fn standard_normal(rng: &mut Xoshiro256PlusPlus, like: &Feat) -> Feat {
    let mut out = like.zeros_like();
    out.data.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    out
}

/// Runs `cfg.steps` updates on `model`, calling `on_step` after each.
pub fn train(
    model: &mut ToyDenoiser,
    clips: &[Clip],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(TrainError::NoClips);
    }
    let params = MaskedLossParams::new(cfg.gamma)?;
    let trainable = cfg.mode.trainable();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let ids: Vec<_> = {
        let store = model.params();
        store
            .ids()
            .filter(|&id| trainable.contains(&store.get(id).role))
            .collect()
    };
    let zeros = |id| vec![0.0; model.params().value(id).len()];
    let mut moment1: Vec<Vec<f64>> = ids.iter().map(|&id| zeros(id)).collect();
    let mut moment2 = moment1.clone();
    for step in 0..cfg.steps {
        let clip = &clips[rng.random_range(0..clips.len())];
        let k = if rng.random::<f64>() < cfg.first_k_prob {
            rng.random_range(1..=cfg.max_first_k.clamp(1, clip.frames_per_view))
        } else {
            0
        };
        // (0, 1]: never exactly the clean end
        let t = 1.0 - rng.random::<f64>();
        let conditions = rng.random::<f64>() >= cfg.cond_dropout;
        let eps = standard_normal(&mut rng, &clip.z0);
        let clean = clean_flags(clip.views, clip.frames_per_view, k);
        let (z_t, times) = noisy_clip(&clip.z0, &eps, t, &clean);

        let (pred, trace) = model.forward_trace(&z_t, &times, &clip.cond, cfg.mode.forward_options(conditions))?;
        let mut err = pred;
        for ((e, &n), &z) in err.data.iter_mut().zip(&eps.data).zip(&clip.z0.data) {
            *e -= n - z;
        }
        if !err.data.iter().all(|v| v.is_finite()) {
            return Err(TrainError::Diverged { step, loss: f64::NAN });
        }
        let loss = masked_diffusion_loss_frames(&err.to_tensor(), &clip.mask.to_tensor(), params, &clean)?;
        let entry = StepLog {
            step,
            loss: loss.value,
            fg_loss: loss.fg_mse,
            bg_loss: loss.bg_mse,
        };
        if !loss.value.is_finite() {
            return Err(TrainError::Diverged { step, loss: loss.value });
        }
        let g_out = Feat::from_tensor(&loss.grad).expect("rank-4 gradient");
        let grads = model.backward(&trace, &g_out);
        let norm = ids
            .iter()
            .flat_map(|&id| grads.get(id))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let store = model.params_mut();
        let lr = cfg.learning_rate;
        let n = (step + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(n), 1.0 - ADAM_BETA2.powi(n));
        for (i, &id) in ids.iter().enumerate() {
            let values = store.value_mut(id);
            let grad = grads.get(id).iter().map(|g| g * scale);
            match cfg.optimizer {
                Optimizer::Sgd => values.iter_mut().zip(grad).for_each(|(v, g)| *v -= lr * g),
                Optimizer::Adam => {
                    for (((v, g), m), s) in values.iter_mut().zip(grad).zip(&mut moment1[i]).zip(&mut moment2[i]) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        *v -= lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        if !store.all_finite() {
            return Err(TrainError::Diverged { step, loss: loss.value });
        }
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
