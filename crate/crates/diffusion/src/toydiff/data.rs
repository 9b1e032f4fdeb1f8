//! Training clips built from rendered condition stacks.
//!
//! The clean latent of a frame comes from a fixed, seeded per-pixel linear
//! map of its shaded semantic appearance: palette color, a depth shading
//! term and a sky gradient on misses.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use voxcond_core::conditions::{ConditionStack, RenderSettings, Renderer};
use voxcond_core::grid::LabelTaxonomy;
use voxcond_core::scenegen::{generate_scene, SceneConfig, SceneError};
use voxcond_core::CameraRig;

use super::feat::Feat;
use super::groups::CondInputs;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("clip needs at least one view and one frame")]
    Empty,
    #[error("condition stacks disagree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("camera rig: {0}")]
    Rig(String),
    #[error("invalid data config: {0}")]
    Config(String),
}

const APPEARANCE_FEATURES: usize = 5;

/// Fixed linear map from per-pixel appearance features to latent channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEncoder {
    channels: usize,
    weight: Vec<f64>,
}

impl LatentEncoder {
    pub const DEFAULT_SEED: u64 = 0x7a11_5eed;

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let std = 1.5 / (APPEARANCE_FEATURES as f64).sqrt();
        let weight = (0..channels * APPEARANCE_FEATURES)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { channels, weight }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn features(stack: &ConditionStack, col: u32, row: u32) -> [f64; APPEARANCE_FEATURES] {
        let [r, g, b] = *stack.semantic.get(col, row);
        let depth = *stack.depth.get(col, row) as f64;
        let unit = |v: u8| v as f64 / 127.5 - 1.0;
        if depth < 1.0 {
            [unit(r), unit(g), unit(b), 1.0 - depth, 0.0]
        } else {
            let h = stack.height().max(2) as f64;
            [-1.0, -1.0, -1.0, 0.0, 1.0 - row as f64 / (h - 1.0)]
        }
    }

    /// Latent of one stack, `(channels, height, width)` row-major.
    pub fn encode(&self, stack: &ConditionStack) -> Vec<f64> {
        let (w, h) = (stack.width(), stack.height());
        let area = (w * h) as usize;
        let mut out = vec![0.0; self.channels * area];
        for row in 0..h {
            for col in 0..w {
                let f = Self::features(stack, col, row);
                let i = (row * w + col) as usize;
                for c in 0..self.channels {
                    let wrow = &self.weight[c * APPEARANCE_FEATURES..(c + 1) * APPEARANCE_FEATURES];
                    out[c * area + i] = wrow.iter().zip(&f).map(|(a, b)| a * b).sum();
                }
            }
        }
        out
    }
}

/// One training or evaluation clip: `views × frames_per_view` frames laid
/// out view-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub name: String,
    pub views: usize,
    pub frames_per_view: usize,
    pub z0: Feat,
    pub cond: CondInputs,
    /// Foreground mask, one channel.
    pub mask: Feat,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.z0.f
    }

    /// Builds a clip from `stacks[view][frame]`.
    pub fn from_stacks(
        name: impl Into<String>,
        stacks: &[Vec<ConditionStack>],
        taxonomy: &LabelTaxonomy,
        encoder: &LatentEncoder,
    ) -> Result<Self, DataError> {
        let views = stacks.len();
        let fpv = stacks.first().map_or(0, Vec::len);
        if views == 0 || fpv == 0 {
            return Err(DataError::Empty);
        }
        let first = &stacks[0][0];
        let (w, h) = (first.width() as usize, first.height() as usize);
        let planes = first.mpi.len();
        for run in stacks {
            if run.len() != fpv {
                return Err(DataError::Inconsistent("views have different frame counts".into()));
            }
            for s in run {
                if (s.width() as usize, s.height() as usize) != (w, h) || s.mpi.len() != planes {
                    return Err(DataError::Inconsistent(format!(
                        "stack {}/{} is {}x{} with {} planes, expected {w}x{h} with {planes}",
                        s.meta.view,
                        s.meta.frame,
                        s.width(),
                        s.height(),
                        s.mpi.len()
                    )));
                }
            }
        }
        let f = views * fpv;
        let area = w * h;
        let cz = encoder.channels();
        let mut z0 = Feat::zeros(f, cz, h, w);
        let mut semantic = Feat::zeros(f, 3, h, w);
        let mut depth = Feat::zeros(f, 1, h, w);
        let mut mpi = Feat::zeros(f, 3 * planes, h, w);
        let mut coordinate = Feat::zeros(f, 3, h, w);
        let mut mask = Feat::zeros(f, 1, h, w);
        for (j, s) in stacks.iter().flatten().enumerate() {
            z0.frame_mut(j).copy_from_slice(&encoder.encode(s));
            for i in 0..area {
                let rgb = s.semantic.pixels()[i];
                let xyz = s.coordinate.pixels()[i];
                for ch in 0..3 {
                    semantic.plane_mut(j, ch)[i] = rgb[ch] as f64 / 255.0;
                    coordinate.plane_mut(j, ch)[i] = xyz[ch] as f64;
                }
                depth.plane_mut(j, 0)[i] = s.depth.pixels()[i] as f64;
                mask.plane_mut(j, 0)[i] = (s.mask.pixels()[i] != 0) as u8 as f64;
                for (p, plane) in s.mpi.iter().enumerate() {
                    let color = taxonomy.color(plane.pixels()[i]);
                    for ch in 0..3 {
                        mpi.plane_mut(j, 3 * p + ch)[i] = color[ch] as f64 / 255.0;
                    }
                }
            }
        }
        Ok(Self {
            name: name.into(),
            views,
            frames_per_view: fpv,
            z0,
            cond: CondInputs {
                semantic,
                depth,
                mpi,
                coordinate,
            },
            mask,
        })
    }

    /// Fraction of pixels marked foreground.
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data.iter().sum::<f64>() / self.mask.data.len() as f64
    }
}

/// Procedural scenes rendered at model resolution and cut into clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSetConfig {
    pub train_seeds: Vec<u64>,
    pub heldout_seeds: Vec<u64>,
    pub frames_per_scene: usize,
    pub frames_per_view: usize,
    pub views: Vec<String>,
    /// Resolution factor applied to the default rig.
    pub scale: f64,
    pub d_max: f64,
    pub planes: usize,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    pub n_buildings: usize,
    pub latent_channels: usize,
    pub latent_seed: u64,
}

impl Default for SyntheticSetConfig {
    fn default() -> Self {
        Self {
            train_seeds: vec![1, 2],
            heldout_seeds: vec![101],
            frames_per_scene: 8,
            frames_per_view: 4,
            views: vec!["front".into(), "front_left".into()],
            scale: 0.25,
            d_max: voxcond_core::conditions::DEFAULT_D_MAX,
            planes: voxcond_core::conditions::DEFAULT_PLANES,
            n_vehicles: 6,
            n_pedestrians: 6,
            n_buildings: 6,
            latent_channels: 8,
            latent_seed: LatentEncoder::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub train: Vec<Clip>,
    pub heldout: Vec<Clip>,
}

impl SyntheticSetConfig {
    pub fn rig(&self) -> Result<CameraRig, DataError> {
        let names: Vec<&str> = self.views.iter().map(String::as_str).collect();
        CameraRig::default_rig()
            .select(&names)
            .and_then(|r| r.scaled(self.scale))
            .map_err(|e| DataError::Rig(e.to_string()))
    }

    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            frames: self.frames_per_scene,
            n_vehicles: self.n_vehicles,
            n_pedestrians: self.n_pedestrians,
            n_buildings: self.n_buildings,
            ..SceneConfig::default()
        }
    }

    /// Clips of one scene: consecutive non-overlapping frame windows.
    pub fn scene_clips(&self, seed: u64) -> Result<Vec<Clip>, DataError> {
        if self.frames_per_view == 0 || self.frames_per_scene < self.frames_per_view {
            return Err(DataError::Config(format!(
                "{} frames per scene cannot hold a {}-frame clip",
                self.frames_per_scene, self.frames_per_view
            )));
        }
        let settings = RenderSettings::new(self.d_max, self.planes).map_err(|e| DataError::Config(e.to_string()))?;
        let scene = generate_scene(&self.scene_config(seed))?;
        let rig = self.rig()?;
        let renderer = Renderer::new(settings);
        let taxonomy = scene.frames[0].taxonomy().clone();
        let encoder = LatentEncoder::new(self.latent_channels, self.latent_seed);
        let stacks: Vec<Vec<ConditionStack>> = rig
            .views()
            .iter()
            .map(|view| {
                scene
                    .frames
                    .iter()
                    .enumerate()
                    .map(|(f, grid)| renderer.render_stack(grid, view, f))
                    .collect()
            })
            .collect();
        (0..self.frames_per_scene / self.frames_per_view)
            .map(|w| {
                let window: Vec<Vec<ConditionStack>> = stacks
                    .iter()
                    .map(|run| run[w * self.frames_per_view..(w + 1) * self.frames_per_view].to_vec())
                    .collect();
                Clip::from_stacks(format!("scene{seed}/clip{w}"), &window, &taxonomy, &encoder)
            })
            .collect()
    }

    pub fn build(&self) -> Result<SyntheticSet, DataError> {
        let collect = |seeds: &[u64]| -> Result<Vec<Clip>, DataError> {
            let mut out = Vec::new();
            for &s in seeds {
                out.extend(self.scene_clips(s)?);
            }
            Ok(out)
        };
        Ok(SyntheticSet {
            train: collect(&self.train_seeds)?,
            heldout: collect(&self.heldout_seeds)?,
        })
    }
}
