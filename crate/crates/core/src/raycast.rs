//! Voxel traversal.
//!
//! [`DdaCaster`] walks the grid by stepping to the nearest axis boundary on
//! each iteration, visiting exactly the cells a ray pierces. When two
//! boundaries are crossed at the same distance the walk steps x before y
//! before z. [`SamplingCaster`] is the brute-force verification route: it
//! marches the ray at a fixed step and bisects onto cell boundaries.
//!
//! Casters are registered by name in a [`CasterRegistry`] so that the
//! renderer and the command line can pick one at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::Ray;
use crate::grid::{LabelId, SemanticGrid, VoxelIndex};

/// Bisection stops once the bracket is this narrow (meters).
pub const BISECTION_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub voxel: VoxelIndex,
    pub label: LabelId,
    /// Entry-face distance along the ray; 0 when the ray starts inside.
    pub distance: f64,
    pub point: Vector3<f64>,
}

/// Every non-empty voxel pierced within range, nearest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayTrace {
    pub hits: Vec<RayHit>,
}

impl RayTrace {
    pub fn first(&self) -> Option<&RayHit> {
        self.hits.first()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }
}

/// A voxel traversal strategy.
pub trait RayCaster: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Nearest non-empty voxel with entry distance `<= d_max`.
    fn first_hit(&self, grid: &SemanticGrid, ray: &Ray, d_max: f64) -> Option<RayHit>;

    /// All non-empty voxels with entry distance `<= d_max`.
    fn full_trace(&self, grid: &SemanticGrid, ray: &Ray, d_max: f64) -> RayTrace;
}

#[derive(Debug, Error)]
#[error("unknown ray caster {name:?} (available: {available})")]
pub struct UnknownCaster {
    pub name: String,
    pub available: String,
}

/// Name → caster table.
#[derive(Clone, Debug, Default)]
pub struct CasterRegistry {
    casters: BTreeMap<String, Arc<dyn RayCaster>>,
}

impl CasterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `dda` and `sampling` (64 samples per voxel).
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(DdaCaster));
        reg.register(Arc::new(SamplingCaster::default()));
        reg
    }

    /// Registers under `caster.name()`, replacing any previous entry.
    pub fn register(&mut self, caster: Arc<dyn RayCaster>) {
        self.casters.insert(caster.name().to_owned(), caster);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn RayCaster>, UnknownCaster> {
        self.casters.get(name).cloned().ok_or_else(|| UnknownCaster {
            name: name.to_owned(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.casters.keys().map(String::as_str).collect()
    }
}

/// Incremental axis-stepping voxel walk.
#[derive(Clone, Copy, Debug, Default)]
pub struct DdaCaster;

impl RayCaster for DdaCaster {
    fn name(&self) -> &str {
        "dda"
    }

    fn first_hit(&self, grid: &SemanticGrid, ray: &Ray, d_max: f64) -> Option<RayHit> {
        first_hit(grid, ray, d_max)
    }

    fn full_trace(&self, grid: &SemanticGrid, ray: &Ray, d_max: f64) -> RayTrace {
        full_trace(grid, ray, d_max)
    }
}

pub fn first_hit(grid: &SemanticGrid, ray: &Ray, d_max: f64) -> Option<RayHit> {
    let mut found = None;
    walk(grid, ray, d_max, |hit| {
        found = Some(hit);
        false
    });
    found
}

pub fn full_trace(grid: &SemanticGrid, ray: &Ray, d_max: f64) -> RayTrace {
    let mut hits = Vec::new();
    walk(grid, ray, d_max, |hit| {
        hits.push(hit);
        true
    });
    RayTrace { hits }
}

/// Clip a ray to the grid AABB. Returns `(t_enter, t_exit, entry_axis)`
/// where `entry_axis` is the slab that determined `t_enter` when the ray
/// starts outside.
fn clip_to_aabb(grid: &SemanticGrid, ray: &Ray, d_max: f64) -> Option<(f64, f64, Option<usize>)> {
    let geo = grid.geometry();
    let (min, max) = (geo.aabb_min(), geo.aabb_max());
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut entry_axis = None;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == 0.0 {
            if o < min[a] || o >= max[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((min[a] - o) / d, (max[a] - o) / d);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            entry_axis = Some(a);
        }
        t_exit = t_exit.min(t1);
    }
    if t_enter <= 0.0 {
        t_enter = 0.0;
        entry_axis = None;
    }
    let t_exit = t_exit.min(d_max);
    (t_enter <= t_exit).then_some((t_enter, t_exit, entry_axis))
}

/// Visits non-empty voxels in traversal order until `visit` returns false.
fn walk(grid: &SemanticGrid, ray: &Ray, d_max: f64, mut visit: impl FnMut(RayHit) -> bool) {
    if !(d_max > 0.0) {
        return;
    }
    let Some((t_enter, t_exit, entry_axis)) = clip_to_aabb(grid, ray, d_max) else {
        return;
    };
    let geo = grid.geometry();
    let dims = geo.dims;
    let min = geo.aabb_min();
    let vs = geo.vs();
    let o = ray.origin;
    let d = ray.direction;

    let start = ray.at(t_enter);
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let last = dims[a] as i64 - 1;
        idx[a] = if entry_axis == Some(a) {
            if d[a] > 0.0 {
                0
            } else {
                last
            }
        } else {
            (((start[a] - min[a]) / vs).floor() as i64).clamp(0, last)
        };
        step[a] = if d[a] > 0.0 {
            1
        } else if d[a] < 0.0 {
            -1
        } else {
            0
        };
    }
    let boundary = |a: usize, i: i64| -> f64 {
        match step[a] {
            1 => (min[a] + (i + 1) as f64 * vs - o[a]) / d[a],
            -1 => (min[a] + i as f64 * vs - o[a]) / d[a],
            _ => f64::INFINITY,
        }
    };
    let mut t_next = [boundary(0, idx[0]), boundary(1, idx[1]), boundary(2, idx[2])];
    let mut t = t_enter;

    loop {
        let voxel = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        let label = grid.label(voxel);
        if !label.is_empty() {
            let hit = RayHit {
                voxel,
                label,
                distance: t,
                point: ray.at(t),
            };
            if !visit(hit) {
                return;
            }
        }
        let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let tn = t_next[a];
        if !(tn <= t_exit) {
            return;
        }
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= dims[a] as i64 {
            return;
        }
        t = t.max(tn);
        t_next[a] = boundary(a, idx[a]);
    }
}

/// Fixed-step marching with bisection refinement. Independent of the DDA
/// walk: it only uses point-in-cell lookups.
#[derive(Clone, Copy, Debug)]
pub struct SamplingCaster {
    pub samples_per_voxel: u32,
}

impl Default for SamplingCaster {
    fn default() -> Self {
        Self {
            samples_per_voxel: 64,
        }
    }
}

impl SamplingCaster {
    pub fn step(&self, grid: &SemanticGrid) -> f64 {
        grid.voxel_size() / self.samples_per_voxel as f64
    }
}

impl RayCaster for SamplingCaster {
    fn name(&self) -> &str {
        "sampling"
    }

    fn first_hit(&self, grid: &SemanticGrid, ray: &Ray, d_max: f64) -> Option<RayHit> {
        oracle_first_hit(grid, ray, d_max, self.step(grid))
    }

    fn full_trace(&self, grid: &SemanticGrid, ray: &Ray, d_max: f64) -> RayTrace {
        oracle_full_trace(grid, ray, d_max, self.step(grid))
    }
}

fn sample_times(d_max: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = (d_max / step).floor() as u64;
    let last_on_grid = n as f64 * step >= d_max;
    (0..=n)
        .map(move |i| i as f64 * step)
        .chain((!last_on_grid).then_some(d_max))
}

/// Smallest `t` in `(lo, hi]` where `inside` becomes true, assuming it is
/// false at `lo` and true at `hi`.
fn bisect(mut lo: f64, mut hi: f64, inside: impl Fn(f64) -> bool) -> f64 {
    while hi - lo > BISECTION_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if inside(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// First sample inside a non-empty voxel, refined onto the entry boundary.
pub fn oracle_first_hit(grid: &SemanticGrid, ray: &Ray, d_max: f64, step: f64) -> Option<RayHit> {
    assert!(step > 0.0, "oracle step must be positive");
    if !(d_max > 0.0) {
        return None;
    }
    let occupied = |t: f64| !grid.label_at(&ray.at(t)).is_empty();
    let mut prev = None;
    for t in sample_times(d_max, step) {
        if occupied(t) {
            let distance = match prev {
                None => t,
                Some(lo) => bisect(lo, t, occupied),
            };
            let point = ray.at(distance);
            let voxel = grid.voxel_of(&point)?;
            return Some(RayHit {
                voxel,
                label: grid.label(voxel),
                distance,
                point,
            });
        }
        prev = Some(t);
    }
    None
}

/// Every distinct non-empty voxel seen by the sampler, with bisected entry
/// distances.
pub fn oracle_full_trace(grid: &SemanticGrid, ray: &Ray, d_max: f64, step: f64) -> RayTrace {
    assert!(step > 0.0, "oracle step must be positive");
    let mut hits: Vec<RayHit> = Vec::new();
    if !(d_max > 0.0) {
        return RayTrace { hits };
    }
    let mut prev: Option<(f64, Option<VoxelIndex>)> = None;
    for t in sample_times(d_max, step) {
        let voxel = grid.voxel_of(&ray.at(t));
        let changed = prev.map_or(true, |(_, v)| v != voxel);
        if changed {
            if let Some(v) = voxel.filter(|v| !grid.label(*v).is_empty()) {
                let distance = match prev {
                    None => t,
                    Some((lo, _)) => bisect(lo, t, |s| grid.voxel_of(&ray.at(s)) == Some(v)),
                };
                if hits.last().map_or(true, |h| h.voxel != v) {
                    hits.push(RayHit {
                        voxel: v,
                        label: grid.label(v),
                        distance,
                        point: ray.at(distance),
                    });
                }
            }
        }
        prev = Some((t, voxel));
    }
    RayTrace { hits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridBuilder, GridGeometry, LabelTaxonomy};

    fn single_voxel_grid() -> SemanticGrid {
        // cell [4.5, 5.5] x [-0.5, 0.5]^2
        let geo = GridGeometry::new([10, 1, 1], 1.0, [-0.5, -0.5, -0.5]).unwrap();
        let mut b = GridBuilder::new(geo, Arc::new(LabelTaxonomy::driving_default()));
        b.set([5, 0, 0], LabelId(3));
        b.build()
    }

    #[test]
    fn empty_grid_misses() {
        let geo = GridGeometry::new([8, 8, 8], 1.0, [0.0; 3]).unwrap();
        let grid = SemanticGrid::empty(geo, Arc::new(LabelTaxonomy::driving_default()));
        let ray = Ray::new(Vector3::new(-1.0, 3.3, 2.2), Vector3::new(1.0, 0.1, 0.2));
        assert!(first_hit(&grid, &ray, 100.0).is_none());
        assert!(full_trace(&grid, &ray, 100.0).is_empty());
        assert!(oracle_first_hit(&grid, &ray, 100.0, 1.0 / 64.0).is_none());
    }

    #[test]
    fn axis_aligned_entry_face() {
        let grid = single_voxel_grid();
        let ray = Ray::new(Vector3::zeros(), Vector3::x());
        let hit = first_hit(&grid, &ray, 20.0).unwrap();
        assert_eq!(hit.voxel, [5, 0, 0]);
        assert_eq!(hit.label, LabelId(3));
        assert!((hit.distance - 4.5).abs() < 1e-12);
        let oracle = oracle_first_hit(&grid, &ray, 20.0, 1.0 / 64.0).unwrap();
        assert_eq!(oracle.voxel, hit.voxel);
        assert!((oracle.distance - 4.5).abs() < 1e-6);
        assert!(first_hit(&grid, &ray, 4.4).is_none());
        assert!(first_hit(&grid, &ray, 4.5).is_some());
    }

    #[test]
    fn origin_inside_occupied_voxel_hits_at_zero() {
        let grid = single_voxel_grid();
        let ray = Ray::new(Vector3::new(5.0, 0.1, 0.0), Vector3::new(1.0, 1.0, 0.0));
        let hit = first_hit(&grid, &ray, 1.0).unwrap();
        assert_eq!(hit.distance, 0.0);
        assert_eq!(oracle_first_hit(&grid, &ray, 1.0, 0.01).unwrap().distance, 0.0);
    }

    #[test]
    fn two_voxel_trace_distances() {
        let geo = GridGeometry::new([10, 1, 1], 1.0, [-0.5, -0.5, -0.5]).unwrap();
        let mut b = GridBuilder::new(geo, Arc::new(LabelTaxonomy::driving_default()));
        b.set([3, 0, 0], LabelId(2));
        b.set([7, 0, 0], LabelId(4));
        let grid = b.build();
        let ray = Ray::new(Vector3::zeros(), Vector3::x());
        let trace = full_trace(&grid, &ray, 50.0);
        assert_eq!(trace.len(), 2);
        assert!((trace.hits[0].distance - 2.5).abs() < 1e-12);
        assert!((trace.hits[1].distance - 6.5).abs() < 1e-12);
        assert_eq!(trace.first(), first_hit(&grid, &ray, 50.0).as_ref());
        let oracle = oracle_full_trace(&grid, &ray, 50.0, 1.0 / 64.0);
        assert_eq!(oracle.len(), 2);
    }

    #[test]
    fn oblique_oracle_matches_slab_distance() {
        let grid = single_voxel_grid();
        let origin = Vector3::new(0.0, -0.3, 0.2);
        let target = Vector3::new(5.0, 0.1, -0.1);
        let ray = Ray::new(origin, target - origin);
        // closed-form slab intersection against [4.5,5.5]x[-0.5,0.5]^2
        let (lo, hi) = (Vector3::new(4.5, -0.5, -0.5), Vector3::new(5.5, 0.5, 0.5));
        let mut t_in = f64::NEG_INFINITY;
        for a in 0..3 {
            let (t0, t1) = ((lo[a] - origin[a]) / ray.direction[a], (hi[a] - origin[a]) / ray.direction[a]);
            t_in = t_in.max(t0.min(t1));
        }
        let oracle = oracle_first_hit(&grid, &ray, 20.0, 1.0 / 64.0).unwrap();
        assert!((oracle.distance - t_in).abs() < 1e-5);
        let dda = first_hit(&grid, &ray, 20.0).unwrap();
        assert!((dda.distance - t_in).abs() < 1e-12);
    }

    #[test]
    fn ray_missing_aabb_is_absent() {
        let grid = single_voxel_grid();
        let ray = Ray::new(Vector3::new(0.0, 5.0, 0.0), Vector3::x());
        assert!(first_hit(&grid, &ray, 100.0).is_none());
        let ray = Ray::new(Vector3::new(20.0, 0.0, 0.0), Vector3::x());
        assert!(first_hit(&grid, &ray, 100.0).is_none());
    }

    #[test]
    fn negative_direction_enters_from_max_face() {
        let grid = single_voxel_grid();
        let ray = Ray::new(Vector3::new(12.0, 0.0, 0.0), -Vector3::x());
        let hit = first_hit(&grid, &ray, 100.0).unwrap();
        assert_eq!(hit.voxel, [5, 0, 0]);
        assert!((hit.distance - 6.5).abs() < 1e-12);
    }

    #[test]
    fn corner_tie_steps_x_first() {
        let geo = GridGeometry::new([2, 2, 1], 1.0, [0.0, 0.0, 0.0]).unwrap();
        let mut b = GridBuilder::new(geo, Arc::new(LabelTaxonomy::driving_default()));
        b.set([1, 0, 0], LabelId(2));
        b.set([0, 1, 0], LabelId(5));
        let grid = b.build();
        // passes exactly through the shared edge at (1, 1)
        let ray = Ray::new(Vector3::new(0.5, 0.5, 0.5), Vector3::new(1.0, 1.0, 0.0));
        let hit = first_hit(&grid, &ray, 10.0).unwrap();
        assert_eq!(hit.voxel, [1, 0, 0]);
    }

    #[test]
    fn registry_lookup() {
        let reg = CasterRegistry::with_builtins();
        assert_eq!(reg.names(), vec!["dda", "sampling"]);
        assert_eq!(reg.get("dda").unwrap().name(), "dda");
        let err = reg.get("octree").unwrap_err();
        assert!(err.to_string().contains("dda, sampling"));
    }
}
