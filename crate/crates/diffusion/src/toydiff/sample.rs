//! Euler sampling of the learned velocity field with classifier-free
//! guidance, and reconstruction error against the clean clip.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::Clip;
use super::feat::Feat;
use super::model::{ForwardOptions, ModelError, ToyDenoiser};
use super::train::{clean_flags, standard_normal};
use crate::numerics::{cfg_combine, euler_integrate, NumericsError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sampling needs at least one step")]
    NoSteps,
    #[error("{k} clean frames requested but views have {frames} frames")]
    TooManyClean { k: usize, frames: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// Clean frames held at the start of every view.
    pub k: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            k: 1,
            cfg_scale: 1.0,
            seed: 0,
        }
    }
}

/// Generates the non-clean frames of `clip` from seeded noise. Frames
/// before `cfg.k` in each view stay at their clean values throughout.
pub fn sample(model: &ToyDenoiser, clip: &Clip, cfg: &SampleConfig, adapter: bool) -> Result<Feat, SampleError> {
    if cfg.steps == 0 {
        return Err(SampleError::NoSteps);
    }
    if cfg.k > clip.frames_per_view {
        return Err(SampleError::TooManyClean {
            k: cfg.k,
            frames: clip.frames_per_view,
        });
    }
    let clean = clean_flags(clip.views, clip.frames_per_view, cfg.k);
    if clean.generated_count() == 0 {
        return Ok(clip.z0.clone());
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let noise = standard_normal(&mut rng, &clip.z0);
    let mut start = clip.z0.clone();
    for j in 0..start.f {
        if !clean.is_clean(j) {
            start.frame_mut(j).copy_from_slice(noise.frame(j));
        }
    }
    let uncond = clip.cond.zeroed();
    let opts = ForwardOptions {
        conditions: true,
        adapter,
    };
    let mut failure: Option<SampleError> = None;
    let shape = start.shape();
    let result = euler_integrate(&start.to_tensor(), cfg.steps, |z, t| {
        let z = Feat::from_tensor(z).expect("rank-4 latent");
        let times: Vec<f64> = (0..z.f).map(|j| if clean.is_clean(j) { 0.0 } else { t }).collect();
        let run = || -> Result<Feat, SampleError> {
            let vc = model.forward(&z, &times, &clip.cond, opts)?;
            let vu = model.forward(&z, &times, &uncond, opts)?;
            let v = cfg_combine(&vc.to_tensor(), &vu.to_tensor(), cfg.cfg_scale)?;
            let mut v = Feat::from_tensor(&v).expect("rank-4 velocity");
            for j in 0..v.f {
                if clean.is_clean(j) {
                    v.frame_mut(j).fill(0.0);
                }
            }
            Ok(v)
        };
        match run() {
            Ok(v) => v.to_tensor(),
            Err(e) => {
                failure.get_or_insert(e);
                Feat::zeros(shape[0], shape[1], shape[2], shape[3]).to_tensor()
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Feat::from_tensor(&result).expect("rank-4 latent"))
}

/// Mean squared error of generated frames against the clean latent, split
/// by the foreground mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconError {
    pub all: f64,
    pub fg: f64,
    pub bg: f64,
}

#[derive(Default)]
struct Accum {
    sum: [f64; 3],
    count: [usize; 3],
}

impl Accum {
    fn finish(&self) -> ReconError {
        let m = |i: usize| if self.count[i] == 0 { 0.0 } else { self.sum[i] / self.count[i] as f64 };
        ReconError {
            all: m(0),
            fg: m(1),
            bg: m(2),
        }
    }
}

/// Samples every clip and pools the squared errors over all of them.
pub fn reconstruction_error(
    model: &ToyDenoiser,
    clips: &[Clip],
    cfg: &SampleConfig,
    adapter: bool,
) -> Result<ReconError, SampleError> {
    let mut acc = Accum::default();
    for clip in clips {
        let out = sample(model, clip, cfg, adapter)?;
        let clean = clean_flags(clip.views, clip.frames_per_view, cfg.k);
        let area = clip.z0.area();
        for j in (0..clip.frames()).filter(|&j| !clean.is_clean(j)) {
            let mask = clip.mask.plane(j, 0);
            for c in 0..clip.z0.c {
                for ((&a, &b), &m) in out.plane(j, c).iter().zip(clip.z0.plane(j, c)).zip(mask) {
                    let sq = (a - b) * (a - b);
                    let bucket = if m != 0.0 { 1 } else { 2 };
                    acc.sum[0] += sq;
                    acc.count[0] += 1;
                    acc.sum[bucket] += sq;
                    acc.count[bucket] += 1;
                }
            }
            debug_assert_eq!(mask.len(), area);
        }
    }
    Ok(acc.finish())
}
