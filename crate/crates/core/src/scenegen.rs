//! Deterministic synthetic driving scenes.
//!
//! A scene is a road slab on the bottom voxel layer, static buildings and
//! vegetation as boxes, and foreground objects (vehicles, pedestrians)
//! moving at constant velocity. Randomness comes from
//! `Xoshiro256PlusPlus::seed_from_u64`, which expands the seed with
//! SplitMix64, so a seed produces the same scene on every platform.
//!
//! Overlaps resolve by paint order: road, then buildings and vegetation,
//! then vehicles, then pedestrians.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridBuilder, GridError, GridGeometry, LabelId, LabelTaxonomy, SemanticGrid, VoxelIndex};

/// Half extents (m) of the box around the ego origin kept free of objects.
const EGO_CLEARANCE: [f64; 3] = [3.0, 2.0, 3.0];
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("infeasible scene config: {0}")]
    Infeasible(String),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn default_dt() -> f64 {
    1.0 / 12.0
}

fn default_dims() -> [usize; 3] {
    [64, 64, 16]
}

fn default_voxel_size() -> f32 {
    0.5
}

fn default_vegetation() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_voxel_size")]
    pub voxel_size: f32,
    #[serde(default)]
    pub n_vehicles: usize,
    #[serde(default)]
    pub n_pedestrians: usize,
    #[serde(default)]
    pub n_buildings: usize,
    #[serde(default = "default_vegetation")]
    pub n_vegetation: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 16,
            dt: default_dt(),
            dims: default_dims(),
            voxel_size: default_voxel_size(),
            n_vehicles: 4,
            n_pedestrians: 4,
            n_buildings: 6,
            n_vegetation: default_vegetation(),
        }
    }
}

/// Axis-aligned box moving at constant velocity. `start` is the box center
/// at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub label: LabelId,
    /// Extent in voxels per axis.
    pub size: [u32; 3],
    pub start: [f64; 3],
    /// m/s.
    pub velocity: [f64; 3],
}

impl ObjectTrack {
    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.start) + Vector3::from(self.velocity) * t
    }

    pub fn half_extent(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(
            self.size[0] as f64,
            self.size[1] as f64,
            self.size[2] as f64,
        ) * (0.5 * voxel_size)
    }

    /// `[min, max)` corners at time `t`.
    pub fn aabb_at(&self, t: f64, voxel_size: f64) -> (Vector3<f64>, Vector3<f64>) {
        let c = self.position_at(t);
        let h = self.half_extent(voxel_size);
        (c - h, c + h)
    }

    /// Checks the track against a grid over `[0, duration]`.
    pub fn validate(&self, geo: &GridGeometry, taxonomy: &LabelTaxonomy, duration: f64) -> Result<(), SceneError> {
        if !taxonomy.is_foreground(self.label) {
            return Err(SceneError::InvalidTrack(format!("label {} is not foreground", self.label)));
        }
        if self.size.iter().any(|&s| s == 0) {
            return Err(SceneError::InvalidTrack(format!("size {:?}", self.size)));
        }
        let (gmin, gmax) = (geo.aabb_min(), geo.aabb_max());
        for t in [0.0, duration] {
            let (lo, hi) = self.aabb_at(t, geo.vs());
            if (0..3).any(|a| lo[a] < gmin[a] - 1e-9 || hi[a] > gmax[a] + 1e-9) {
                return Err(SceneError::InvalidTrack(format!("object leaves the grid by t = {t}")));
            }
        }
        Ok(())
    }
}

/// Voxels whose centers lie in the object's half-open AABB at time `t`.
pub fn rasterize_track(track: &ObjectTrack, geo: &GridGeometry, t: f64) -> BTreeSet<VoxelIndex> {
    let vs = geo.vs();
    let (lo, hi) = track.aabb_at(t, vs);
    let min = geo.aabb_min();
    // center of cell i is min + (i + 0.5)·vs; want lo <= center < hi
    let range = |a: usize| {
        // one cell of slack each side; the exact test below decides
        let first = (((lo[a] - min[a]) / vs - 0.5).ceil() - 1.0).max(0.0) as usize;
        let end = ((((hi[a] - min[a]) / vs - 0.5).ceil() + 1.0).max(0.0) as usize).min(geo.dims[a]);
        first..end
    };
    let mut out = BTreeSet::new();
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let c = geo.center_of([i, j, k]);
                if (0..3).all(|a| lo[a] <= c[a] && c[a] < hi[a]) {
                    out.insert([i, j, k]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticBox {
    pub label: LabelId,
    pub lo: VoxelIndex,
    pub hi: VoxelIndex,
}

/// Track manifest written next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackManifest {
    pub seed: u64,
    pub dt: f64,
    pub frames: usize,
    pub geometry: GridGeometry,
    pub statics: Vec<StaticBox>,
    pub tracks: Vec<ObjectTrack>,
}

#[derive(Clone, Debug)]
pub struct TemporalScene {
    pub frames: Vec<SemanticGrid>,
    pub tracks: Vec<ObjectTrack>,
    pub statics: Vec<StaticBox>,
    pub dt: f64,
    pub seed: u64,
}

impl TemporalScene {
    /// Rasterizes `tracks` over a static background for `frames` frames.
    pub fn from_parts(
        background: &SemanticGrid,
        statics: Vec<StaticBox>,
        tracks: Vec<ObjectTrack>,
        frames: usize,
        dt: f64,
        seed: u64,
    ) -> Result<Self, SceneError> {
        if frames == 0 {
            return Err(SceneError::InvalidConfig("frames must be at least 1".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SceneError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        let geo = *background.geometry();
        let tax = background.taxonomy().clone();
        let duration = (frames - 1) as f64 * dt;
        for t in &tracks {
            t.validate(&geo, &tax, duration)?;
        }
        let pedestrian = tax.by_name("pedestrian");
        // vehicles first, then pedestrians on top
        let mut order: Vec<&ObjectTrack> = tracks.iter().collect();
        order.sort_by_key(|t| Some(t.label) == pedestrian);
        let frames = (0..frames)
            .map(|f| {
                let mut b = background.clone().into_builder();
                for track in &order {
                    for idx in rasterize_track(track, &geo, f as f64 * dt) {
                        b.set(idx, track.label);
                    }
                }
                b.build()
            })
            .collect();
        Ok(Self {
            frames,
            tracks,
            statics,
            dt,
            seed,
        })
    }

    pub fn manifest(&self) -> TrackManifest {
        TrackManifest {
            seed: self.seed,
            dt: self.dt,
            frames: self.frames.len(),
            geometry: *self.frames[0].geometry(),
            statics: self.statics.clone(),
            tracks: self.tracks.clone(),
        }
    }
}

fn overlaps(a_lo: &Vector3<f64>, a_hi: &Vector3<f64>, b_lo: &Vector3<f64>, b_hi: &Vector3<f64>) -> bool {
    (0..3).all(|i| a_lo[i] < b_hi[i] && b_lo[i] < a_hi[i])
}

fn ego_box() -> (Vector3<f64>, Vector3<f64>) {
    let h = Vector3::from(EGO_CLEARANCE);
    (-h, h)
}

struct Placer<'a> {
    rng: Xoshiro256PlusPlus,
    geo: &'a GridGeometry,
}

impl Placer<'_> {
    fn static_box(&mut self, label: LabelId, xy: (u32, u32), z: (u32, u32)) -> Result<StaticBox, SceneError> {
        let dims = self.geo.dims;
        let (ego_lo, ego_hi) = ego_box();
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = [
                self.rng.random_range(xy.0..=xy.1) as usize,
                self.rng.random_range(xy.0..=xy.1) as usize,
                self.rng.random_range(z.0..=z.1) as usize,
            ];
            if size[0] > dims[0] || size[1] > dims[1] || size[2] + 1 > dims[2] {
                continue;
            }
            let lo = [
                self.rng.random_range(0..=dims[0] - size[0]),
                self.rng.random_range(0..=dims[1] - size[1]),
                1,
            ];
            let hi = [lo[0] + size[0], lo[1] + size[1], 1 + size[2]];
            let (wlo, _) = self.geo.cell_bounds(lo);
            let (_, whi) = self.geo.cell_bounds([hi[0] - 1, hi[1] - 1, hi[2] - 1]);
            if !overlaps(&wlo, &whi, &ego_lo, &ego_hi) {
                return Ok(StaticBox { label, lo, hi });
            }
        }
        Err(SceneError::Infeasible(format!(
            "could not place a static box of label {label} clear of the ego vehicle"
        )))
    }

    fn track(&mut self, label: LabelId, size: [u32; 3], speed: (f64, f64), axis_aligned: bool, duration: f64) -> Result<ObjectTrack, SceneError> {
        let vs = self.geo.vs();
        let (gmin, gmax) = (self.geo.aabb_min(), self.geo.aabb_max());
        let (ego_lo, ego_hi) = ego_box();
        for _ in 0..PLACEMENT_ATTEMPTS {
            let along_y = self.rng.random_bool(0.5);
            let size = if axis_aligned && along_y {
                [size[1], size[0], size[2]]
            } else {
                size
            };
            let s = self.rng.random_range(speed.0..=speed.1);
            let velocity = if axis_aligned {
                let sign = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                if along_y {
                    [0.0, sign * s, 0.0]
                } else {
                    [sign * s, 0.0, 0.0]
                }
            } else {
                let heading = self.rng.random_range(0.0..std::f64::consts::TAU);
                [s * heading.cos(), s * heading.sin(), 0.0]
            };
            let half = Vector3::new(size[0] as f64, size[1] as f64, size[2] as f64) * (0.5 * vs);
            if (0..2).any(|a| 2.0 * half[a] > gmax[a] - gmin[a]) || 2.0 * half.z + vs > gmax.z - gmin.z {
                continue;
            }
            let mut start = [0.0; 3];
            for a in 0..2 {
                start[a] = self.rng.random_range(gmin[a] + half[a]..=gmax[a] - half[a]);
            }
            // resting on top of the road slab
            start[2] = gmin.z + vs + half.z;
            let track = ObjectTrack {
                label,
                size,
                start,
                velocity,
            };
            let (a_lo, a_hi) = track.aabb_at(0.0, vs);
            let (b_lo, b_hi) = track.aabb_at(duration, vs);
            let inside = (0..3).all(|i| b_lo[i] >= gmin[i] && b_hi[i] <= gmax[i]);
            let swept_lo = a_lo.inf(&b_lo);
            let swept_hi = a_hi.sup(&b_hi);
            if inside && !overlaps(&swept_lo, &swept_hi, &ego_lo, &ego_hi) {
                return Ok(track);
            }
        }
        Err(SceneError::Infeasible(format!(
            "could not place a moving object of label {label} inside the grid"
        )))
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<TemporalScene, SceneError> {
    generate_scene_with(config, Arc::new(LabelTaxonomy::driving_default()))
}

/// Like [`generate_scene`] with a caller-supplied taxonomy, which must name
/// `road`, `building`, `vegetation`, `vehicle` and `pedestrian`.
pub fn generate_scene_with(config: &SceneConfig, taxonomy: Arc<LabelTaxonomy>) -> Result<TemporalScene, SceneError> {
    if config.frames == 0 {
        return Err(SceneError::InvalidConfig("frames must be at least 1".into()));
    }
    if !(config.dt.is_finite() && config.dt > 0.0) {
        return Err(SceneError::InvalidConfig(format!("dt must be positive, got {}", config.dt)));
    }
    if config.dims[2] < 2 {
        return Err(SceneError::Infeasible("need at least two voxel layers above the road".into()));
    }
    let label = |name: &str| {
        taxonomy
            .by_name(name)
            .ok_or_else(|| SceneError::InvalidConfig(format!("taxonomy has no {name:?} label")))
    };
    let (road, building, vegetation, vehicle, pedestrian) = (
        label("road")?,
        label("building")?,
        label("vegetation")?,
        label("vehicle")?,
        label("pedestrian")?,
    );
    let geo = GridGeometry::ego_centric(config.dims, config.voxel_size)?;
    let vs = geo.vs();
    let duration = (config.frames - 1) as f64 * config.dt;
    let mut placer = Placer {
        rng: Xoshiro256PlusPlus::seed_from_u64(config.seed),
        geo: &geo,
    };

    let mut statics = Vec::new();
    let meters = |m: f64| ((m / vs).round() as u32).max(1);
    for _ in 0..config.n_buildings {
        statics.push(placer.static_box(building, (meters(2.0), meters(6.0)), (meters(3.0), meters(7.0)))?);
    }
    for _ in 0..config.n_vegetation {
        statics.push(placer.static_box(vegetation, (meters(1.0), meters(2.0)), (meters(1.0), meters(3.0)))?);
    }
    let mut background = GridBuilder::new(geo, taxonomy.clone());
    background.fill_box([0, 0, 0], [geo.dims[0], geo.dims[1], 1], road);
    for b in &statics {
        background.fill_box(b.lo, b.hi, b.label);
    }
    let background = background.build();

    let mut tracks = Vec::new();
    let vehicle_size = [meters(4.0), meters(2.0), meters(1.5)];
    for _ in 0..config.n_vehicles {
        tracks.push(placer.track(vehicle, vehicle_size, (1.0, 8.0), true, duration)?);
    }
    let pedestrian_size = [meters(0.5), meters(0.5), meters(1.8)];
    for _ in 0..config.n_pedestrians {
        tracks.push(placer.track(pedestrian, pedestrian_size, (0.5, 1.5), false, duration)?);
    }
    TemporalScene::from_parts(&background, statics, tracks, config.frames, config.dt, config.seed)
}
