//! Condition maps rendered from a semantic grid by ray casting.
//!
//! Per pixel (ray through the pixel center) the renderer produces:
//!
//! * semantic: palette color of the first hit, black on a miss;
//! * depth: first-hit distance over `d_max` in `[0, 1)`, exactly `1.0` on a miss;
//! * coordinate: first-hit point normalized by the grid AABB, `(0,0,0)` on a miss;
//! * MPI: `planes` equal distance slabs over `[0, d_max]`, each holding the
//!   label of the nearest traced voxel whose entry distance falls in it;
//! * mask: 1 where the first hit is a foreground label.
//!
//! A hit exactly at the AABB min corner encodes the same coordinate as a
//! miss; consumers tell them apart with `depth < 1`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{pixel_center_ray, CameraRig, CameraView, Extrinsics, Intrinsics, Ray};
use crate::grid::{GridGeometry, LabelId, LabelTaxonomy, SemanticGrid};
use crate::image::Image;
use crate::pnm::{self, PnmError, PnmImage};
use crate::raycast::{DdaCaster, RayCaster, RayHit, RayTrace};

pub const DEFAULT_D_MAX: f64 = 51.2;
pub const DEFAULT_PLANES: usize = 8;

/// Largest `f32` below one; hits never encode as the miss value.
const MAX_HIT_DEPTH: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("invalid render settings: {0}")]
    Settings(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Pnm { path: PathBuf, source: PnmError },
    #[error("{path}: {msg}")]
    Decode { path: PathBuf, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub d_max: f64,
    pub planes: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            d_max: DEFAULT_D_MAX,
            planes: DEFAULT_PLANES,
        }
    }
}

impl RenderSettings {
    pub fn new(d_max: f64, planes: usize) -> Result<Self, ConditionError> {
        if !(d_max.is_finite() && d_max > 0.0) {
            return Err(ConditionError::Settings(format!("d_max must be positive, got {d_max}")));
        }
        if planes == 0 {
            return Err(ConditionError::Settings("plane count must be at least 1".into()));
        }
        Ok(Self { d_max, planes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub view: String,
    pub frame: usize,
    pub d_max: f64,
    pub planes: usize,
}

/// The four condition maps plus the foreground mask for one view and frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionStack {
    pub meta: StackMeta,
    pub semantic: Image<[u8; 3]>,
    pub depth: Image<f32>,
    pub coordinate: Image<[f32; 3]>,
    pub mpi: Vec<Image<LabelId>>,
    pub mask: Image<u8>,
}

/// A rendered stack and the wall time it took.
#[derive(Clone, Debug)]
pub struct ViewRender {
    pub stack: ConditionStack,
    pub elapsed: Duration,
    pub rays: usize,
}

impl ViewRender {
    pub fn rays_per_second(&self) -> f64 {
        self.rays as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

#[inline]
pub fn depth_value(hit: Option<&RayHit>, d_max: f64) -> f32 {
    match hit {
        None => 1.0,
        Some(h) => ((h.distance / d_max).clamp(0.0, 1.0) as f32).min(MAX_HIT_DEPTH),
    }
}

#[inline]
pub fn coordinate_value(geo: &GridGeometry, hit: Option<&RayHit>) -> [f32; 3] {
    match hit {
        None => [0.0; 3],
        Some(h) => {
            let (min, max) = (geo.aabb_min(), geo.aabb_max());
            [0, 1, 2].map(|a| ((h.point[a] - min[a]) / (max[a] - min[a])).clamp(0.0, 1.0) as f32)
        }
    }
}

/// World point encoded by a coordinate-map pixel.
pub fn decode_coordinate(geo: &GridGeometry, c: [f32; 3]) -> Vector3<f64> {
    let (min, max) = (geo.aabb_min(), geo.aabb_max());
    Vector3::from_fn(|a, _| min[a] + c[a] as f64 * (max[a] - min[a]))
}

/// Slab holding entry distance `distance`; `d_max` itself goes to the last.
#[inline]
pub fn slab_index(distance: f64, d_max: f64, planes: usize) -> usize {
    ((distance / d_max * planes as f64).floor().max(0.0) as usize).min(planes - 1)
}

pub fn mpi_pixel(trace: &RayTrace, d_max: f64, planes: usize) -> Vec<LabelId> {
    let mut out = vec![LabelId::EMPTY; planes];
    for hit in &trace.hits {
        let p = slab_index(hit.distance, d_max, planes);
        if out[p].is_empty() {
            out[p] = hit.label;
        }
    }
    out
}

/// Renders condition maps with a pluggable traversal strategy.
#[derive(Clone, Debug)]
pub struct Renderer {
    caster: Arc<dyn RayCaster>,
    settings: RenderSettings,
}

impl Renderer {
    pub fn new(settings: RenderSettings) -> Self {
        Self {
            caster: Arc::new(DdaCaster),
            settings,
        }
    }

    pub fn with_caster(mut self, caster: Arc<dyn RayCaster>) -> Self {
        self.caster = caster;
        self
    }

    pub fn settings(&self) -> &RenderSettings {
        &self.settings
    }

    pub fn caster(&self) -> &dyn RayCaster {
        self.caster.as_ref()
    }

    fn per_pixel<T: Send>(&self, intr: &Intrinsics, extr: &Extrinsics, f: impl Fn(&Ray) -> T + Sync) -> Image<T> {
        let w = intr.width;
        let data: Vec<T> = (0..intr.pixel_count())
            .into_par_iter()
            .map(|i| {
                let (col, row) = (i as u32 % w, i as u32 / w);
                f(&pixel_center_ray(intr, extr, col, row))
            })
            .collect();
        Image::from_vec(w, intr.height, data).expect("pixel count matches")
    }

    fn first(&self, grid: &SemanticGrid, ray: &Ray) -> Option<RayHit> {
        self.caster.first_hit(grid, ray, self.settings.d_max)
    }

    pub fn render_semantic(&self, grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics) -> Image<[u8; 3]> {
        let tax = grid.taxonomy();
        self.per_pixel(intr, extr, |ray| {
            self.first(grid, ray).map_or([0; 3], |h| tax.color(h.label))
        })
    }

    pub fn render_depth(&self, grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics) -> Image<f32> {
        let d_max = self.settings.d_max;
        self.per_pixel(intr, extr, |ray| depth_value(self.first(grid, ray).as_ref(), d_max))
    }

    pub fn render_coordinate(&self, grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics) -> Image<[f32; 3]> {
        let geo = grid.geometry();
        self.per_pixel(intr, extr, |ray| coordinate_value(geo, self.first(grid, ray).as_ref()))
    }

    pub fn render_mpi(&self, grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics) -> Vec<Image<LabelId>> {
        let RenderSettings { d_max, planes } = self.settings;
        let per_pixel = self.per_pixel(intr, extr, |ray| {
            mpi_pixel(&self.caster.full_trace(grid, ray, d_max), d_max, planes)
        });
        (0..planes).map(|p| per_pixel.map(|labels| labels[p])).collect()
    }

    pub fn render_mask(&self, grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics) -> Image<u8> {
        let tax = grid.taxonomy();
        self.per_pixel(intr, extr, |ray| {
            self.first(grid, ray)
                .is_some_and(|h| tax.is_foreground(h.label)) as u8
        })
    }

    /// All five maps from one traversal per pixel.
    pub fn render_stack(&self, grid: &SemanticGrid, view: &CameraView, frame: usize) -> ConditionStack {
        let RenderSettings { d_max, planes } = self.settings;
        let tax = grid.taxonomy();
        let geo = grid.geometry();
        let (intr, extr) = (&view.intrinsics, &view.extrinsics);
        let px = self.per_pixel(intr, extr, |ray| {
            let trace = self.caster.full_trace(grid, ray, d_max);
            let first = trace.first();
            (
                first.map_or([0; 3], |h| tax.color(h.label)),
                depth_value(first, d_max),
                coordinate_value(geo, first),
                mpi_pixel(&trace, d_max, planes),
                first.is_some_and(|h| tax.is_foreground(h.label)) as u8,
            )
        });
        ConditionStack {
            meta: StackMeta {
                view: view.name.clone(),
                frame,
                d_max,
                planes,
            },
            semantic: px.map(|p| p.0),
            depth: px.map(|p| p.1),
            coordinate: px.map(|p| p.2),
            mpi: (0..planes).map(|i| px.map(|p| p.3[i])).collect(),
            mask: px.map(|p| p.4),
        }
    }

    /// Every view of the rig, timed per view.
    pub fn render_rig(&self, grid: &SemanticGrid, rig: &CameraRig, frame: usize) -> Vec<ViewRender> {
        rig.views()
            .iter()
            .map(|view| {
                let start = Instant::now();
                let stack = self.render_stack(grid, view, frame);
                ViewRender {
                    stack,
                    elapsed: start.elapsed(),
                    rays: view.intrinsics.pixel_count(),
                }
            })
            .collect()
    }
}

pub fn render_semantic(grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics, d_max: f64) -> Image<[u8; 3]> {
    Renderer::new(RenderSettings { d_max, planes: 1 }).render_semantic(grid, intr, extr)
}

pub fn render_depth(grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics, d_max: f64) -> Image<f32> {
    Renderer::new(RenderSettings { d_max, planes: 1 }).render_depth(grid, intr, extr)
}

pub fn render_coordinate(grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics, d_max: f64) -> Image<[f32; 3]> {
    Renderer::new(RenderSettings { d_max, planes: 1 }).render_coordinate(grid, intr, extr)
}

pub fn render_mpi(grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics, d_max: f64, planes: usize) -> Vec<Image<LabelId>> {
    Renderer::new(RenderSettings { d_max, planes }).render_mpi(grid, intr, extr)
}

pub fn render_mask(grid: &SemanticGrid, intr: &Intrinsics, extr: &Extrinsics, d_max: f64) -> Image<u8> {
    Renderer::new(RenderSettings { d_max, planes: 1 }).render_mask(grid, intr, extr)
}

/// Depth on disk: 16-bit, 65535 reserved for misses.
pub fn quantize_depth(depth: f32) -> u16 {
    if depth >= 1.0 {
        u16::MAX
    } else {
        ((depth as f64 * 65535.0).round() as u16).min(u16::MAX - 1)
    }
}

pub fn dequantize_depth(q: u16) -> f32 {
    if q == u16::MAX {
        1.0
    } else {
        (q as f64 / 65535.0) as f32
    }
}

fn quantize_unit(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

/// Condition kinds as they appear in file names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Semantic,
    Depth,
    Mask,
    Coordinate,
    Mpi(usize),
}

impl MapKind {
    pub fn file_name(self, view: &str) -> String {
        match self {
            MapKind::Semantic => format!("{view}_semantic.ppm"),
            MapKind::Depth => format!("{view}_depth.pgm"),
            MapKind::Mask => format!("{view}_mask.pgm"),
            MapKind::Coordinate => format!("{view}_coordinate.ppm"),
            MapKind::Mpi(p) => format!("{view}_mpi_{p}.ppm"),
        }
    }

    /// Every file one stack writes: four maps plus one per MPI plane.
    pub fn all(planes: usize) -> Vec<MapKind> {
        let mut kinds = vec![MapKind::Semantic, MapKind::Depth, MapKind::Mask, MapKind::Coordinate];
        kinds.extend((0..planes).map(MapKind::Mpi));
        kinds
    }
}

/// `{root}/{scene}/{frame:04}`.
pub fn frame_dir(root: &Path, scene: &str, frame: usize) -> PathBuf {
    root.join(scene).join(format!("{frame:04}"))
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, ConditionError> {
    fs::write(&path, bytes).map_err(|source| ConditionError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

impl ConditionStack {
    pub fn width(&self) -> u32 {
        self.semantic.width()
    }

    pub fn height(&self) -> u32 {
        self.semantic.height()
    }

    /// Semantic labels decoded from the palette.
    pub fn semantic_labels(&self, taxonomy: &LabelTaxonomy) -> Image<LabelId> {
        self.semantic
            .map(|c| taxonomy.label_of_color(*c).unwrap_or(LabelId::EMPTY))
    }

    /// Writes every map into `dir` (which must exist). Returns the paths in
    /// [`MapKind::all`] order.
    pub fn write_to(&self, dir: &Path, taxonomy: &LabelTaxonomy) -> Result<Vec<PathBuf>, ConditionError> {
        let view = &self.meta.view;
        let mut paths = Vec::new();
        for kind in MapKind::all(self.meta.planes) {
            let bytes = match kind {
                MapKind::Semantic => pnm::encode_ppm8(&self.semantic),
                MapKind::Depth => pnm::encode_pgm16(&self.depth.map(|d| quantize_depth(*d))),
                MapKind::Mask => pnm::encode_pgm8(&self.mask.map(|m| if *m != 0 { 255 } else { 0 })),
                MapKind::Coordinate => pnm::encode_ppm16(&self.coordinate.map(|c| c.map(quantize_unit))),
                MapKind::Mpi(p) => pnm::encode_ppm8(&self.mpi[p].map(|l| taxonomy.color(*l))),
            };
            paths.push(write_file(dir.join(kind.file_name(view)), &bytes)?);
        }
        Ok(paths)
    }

    /// Inverse of [`write_to`](Self::write_to), up to 16-bit quantization of
    /// depth and coordinates.
    pub fn read_from(
        dir: &Path,
        view: &str,
        frame: usize,
        settings: RenderSettings,
        taxonomy: &LabelTaxonomy,
    ) -> Result<Self, ConditionError> {
        let load = |kind: MapKind| -> Result<(PathBuf, PnmImage), ConditionError> {
            let path = dir.join(kind.file_name(view));
            let bytes = fs::read(&path).map_err(|source| ConditionError::Io {
                path: path.clone(),
                source,
            })?;
            let img = pnm::decode(&bytes).map_err(|source| ConditionError::Pnm {
                path: path.clone(),
                source,
            })?;
            Ok((path, img))
        };
        let wrong = |path: PathBuf, what: &str| ConditionError::Decode {
            path,
            msg: format!("expected {what}"),
        };
        let labels = |path: PathBuf, img: Image<[u8; 3]>| -> Result<Image<LabelId>, ConditionError> {
            let mut out = Image::filled(img.width(), img.height(), LabelId::EMPTY);
            for (i, c) in img.pixels().iter().enumerate() {
                out.pixels_mut()[i] = taxonomy.label_of_color(*c).ok_or_else(|| ConditionError::Decode {
                    path: path.clone(),
                    msg: format!("color {c:?} is not in the taxonomy"),
                })?;
            }
            Ok(out)
        };

        let semantic = match load(MapKind::Semantic)? {
            (_, PnmImage::Rgb8(img)) => img,
            (p, _) => return Err(wrong(p, "8-bit RGB")),
        };
        let depth = match load(MapKind::Depth)? {
            (_, PnmImage::Gray16(img)) => img.map(|q| dequantize_depth(*q)),
            (p, _) => return Err(wrong(p, "16-bit gray")),
        };
        let mask = match load(MapKind::Mask)? {
            (_, PnmImage::Gray8(img)) => img.map(|m| (*m != 0) as u8),
            (p, _) => return Err(wrong(p, "8-bit gray")),
        };
        let coordinate = match load(MapKind::Coordinate)? {
            (_, PnmImage::Rgb16(img)) => img.map(|c| c.map(|v| (v as f64 / 65535.0) as f32)),
            (p, _) => return Err(wrong(p, "16-bit RGB")),
        };
        let mut mpi = Vec::with_capacity(settings.planes);
        for p in 0..settings.planes {
            mpi.push(match load(MapKind::Mpi(p))? {
                (path, PnmImage::Rgb8(img)) => labels(path, img)?,
                (path, _) => return Err(wrong(path, "8-bit RGB")),
            });
        }
        let size = (semantic.width(), semantic.height());
        let sizes_match = [
            (depth.width(), depth.height()),
            (mask.width(), mask.height()),
            (coordinate.width(), coordinate.height()),
        ]
        .into_iter()
        .chain(mpi.iter().map(|m| (m.width(), m.height())))
        .all(|s| s == size);
        if !sizes_match {
            return Err(ConditionError::Decode {
                path: dir.to_path_buf(),
                msg: format!("maps of view {view:?} disagree in size"),
            });
        }
        Ok(Self {
            meta: StackMeta {
                view: view.to_owned(),
                frame,
                d_max: settings.d_max,
                planes: settings.planes,
            },
            semantic,
            depth,
            coordinate,
            mpi,
            mask,
        })
    }
}

/// Per-frame reproducibility record written next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSidecar {
    pub scene: String,
    pub frame: usize,
    pub d_max: f64,
    pub planes: usize,
    pub caster: String,
    pub rig_hash: String,
    pub grid_hash: String,
    pub views: Vec<String>,
}

pub const SIDECAR_FILE: &str = "sidecar.json";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridBuilder, GridGeometry, LabelTaxonomy};

    fn taxonomy() -> Arc<LabelTaxonomy> {
        Arc::new(LabelTaxonomy::driving_default())
    }

    fn camera() -> (Intrinsics, Extrinsics) {
        (
            Intrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30).unwrap(),
            Extrinsics::looking_at_yaw(0.0, Vector3::new(0.0, 0.0, 0.0)),
        )
    }

    /// Wall of `label` filling x in [10, 11), y in [-10, 10), z in [-10, 10).
    fn wall(label: LabelId) -> SemanticGrid {
        let geo = GridGeometry::new([12, 20, 20], 1.0, [0.0, -10.0, -10.0]).unwrap();
        let mut b = GridBuilder::new(geo, taxonomy());
        b.fill_box([10, 0, 0], [11, 20, 20], label);
        b.build()
    }

    #[test]
    fn empty_grid_renders_miss_values() {
        let geo = GridGeometry::new([8, 8, 8], 1.0, [0.0, -4.0, -4.0]).unwrap();
        let grid = SemanticGrid::empty(geo, taxonomy());
        let (i, e) = camera();
        let r = Renderer::new(RenderSettings::default());
        assert!(r.render_semantic(&grid, &i, &e).pixels().iter().all(|c| *c == [0; 3]));
        assert!(r.render_depth(&grid, &i, &e).pixels().iter().all(|d| *d == 1.0));
        assert!(r.render_mask(&grid, &i, &e).pixels().iter().all(|m| *m == 0));
        assert!(r.render_coordinate(&grid, &i, &e).pixels().iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn wall_depth_follows_euclidean_distance() {
        let grid = wall(LabelId(2));
        let (i, e) = camera();
        let depth = render_depth(&grid, &i, &e, 20.0);
        // pixel (20, 15) has its center half a pixel off the principal ray
        for (col, row) in [(20u32, 15u32), (5, 3), (33, 27)] {
            let ray = pixel_center_ray(&i, &e, col, row);
            let cos = ray.direction.x;
            let expected = 10.0 / (cos * 20.0);
            assert!((*depth.get(col, row) as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn principal_pixel_of_wall_is_half_depth() {
        let grid = wall(LabelId(2));
        // odd-sized image so a pixel center sits on the principal ray
        let i = Intrinsics::new(40.0, 40.0, 20.5, 15.5, 41, 31).unwrap();
        let (_, e) = camera();
        let depth = render_depth(&grid, &i, &e, 20.0);
        assert_eq!(*depth.get(20, 15), 0.5);
    }

    #[test]
    fn single_vehicle_voxel_ahead() {
        let geo = GridGeometry::new([12, 8, 8], 1.0, [0.0, -4.0, -4.0]).unwrap();
        let mut b = GridBuilder::new(geo, taxonomy());
        b.set([10, 4, 4], LabelId(3));
        let grid = b.build();
        let i = Intrinsics::new(40.0, 40.0, 20.5, 15.5, 41, 31).unwrap();
        let e = Extrinsics::looking_at_yaw(0.0, Vector3::new(0.0, 0.5, 0.5));
        let sem = render_semantic(&grid, &i, &e, 50.0);
        assert_eq!(*sem.get(20, 15), [0, 0, 142]);
        assert_eq!(*sem.get(0, 0), [0, 0, 0]);
        assert_eq!(*sem.get(40, 30), [0, 0, 0]);
        let mask = render_mask(&grid, &i, &e, 50.0);
        assert!(mask.enumerate().all(|(c, r, m)| (*m == 1) == (*sem.get(c, r) == [0, 0, 142])));
    }

    #[test]
    fn slab_arithmetic() {
        assert_eq!(slab_index(0.3 * 40.0, 40.0, 4), 1);
        assert_eq!(slab_index(0.0, 40.0, 4), 0);
        assert_eq!(slab_index(40.0, 40.0, 4), 3);
        assert_eq!(slab_index(39.999, 40.0, 8), 7);
    }

    #[test]
    fn single_plane_mpi_equals_semantic_labels() {
        let grid = wall(LabelId(5));
        let (i, e) = camera();
        let sem = render_semantic(&grid, &i, &e, 30.0);
        let mpi = render_mpi(&grid, &i, &e, 30.0, 1);
        let labels = sem.map(|c| grid.taxonomy().label_of_color(*c).unwrap());
        assert_eq!(mpi[0], labels);
    }

    #[test]
    fn occluded_object_survives_in_far_plane() {
        let geo = GridGeometry::new([40, 8, 8], 1.0, [0.0, -4.0, -4.0]).unwrap();
        let mut b = GridBuilder::new(geo, taxonomy());
        b.fill_box([5, 0, 0], [6, 8, 8], LabelId(3)); // near vehicle wall, slab 0
        b.fill_box([25, 0, 0], [26, 8, 8], LabelId(4)); // far pedestrian wall, slab 2
        let grid = b.build();
        let i = Intrinsics::new(40.0, 40.0, 20.5, 15.5, 41, 31).unwrap();
        let e = Extrinsics::looking_at_yaw(0.0, Vector3::new(0.0, 0.5, 0.5));
        let r = Renderer::new(RenderSettings::new(40.0, 4).unwrap());
        let stack = r.render_stack(&grid, &CameraView { name: "f".into(), intrinsics: i, extrinsics: e }, 0);
        assert_eq!(*stack.semantic.get(20, 15), [0, 0, 142]);
        assert_eq!(*stack.mpi[0].get(20, 15), LabelId(3));
        assert_eq!(*stack.mpi[1].get(20, 15), LabelId::EMPTY);
        assert_eq!(*stack.mpi[2].get(20, 15), LabelId(4));
        assert_eq!(*stack.mpi[3].get(20, 15), LabelId::EMPTY);
    }

    #[test]
    fn depth_quantization_keeps_miss_distinct() {
        assert_eq!(quantize_depth(1.0), u16::MAX);
        assert_eq!(quantize_depth(MAX_HIT_DEPTH), u16::MAX - 1);
        assert_eq!(quantize_depth(0.0), 0);
        assert_eq!(dequantize_depth(u16::MAX), 1.0);
        assert!(dequantize_depth(u16::MAX - 1) < 1.0);
        let hit = RayHit {
            voxel: [0; 3],
            label: LabelId(1),
            distance: 20.0,
            point: Vector3::zeros(),
        };
        assert!(depth_value(Some(&hit), 20.0) < 1.0);
    }

    #[test]
    fn file_names_follow_contract() {
        let names: Vec<_> = MapKind::all(2).into_iter().map(|k| k.file_name("front")).collect();
        assert_eq!(
            names,
            [
                "front_semantic.ppm",
                "front_depth.pgm",
                "front_mask.pgm",
                "front_coordinate.ppm",
                "front_mpi_0.ppm",
                "front_mpi_1.ppm"
            ]
        );
        assert_eq!(frame_dir(Path::new("out"), "s", 7), Path::new("out/s/0007"));
    }

    #[test]
    fn settings_validation() {
        assert!(RenderSettings::new(0.0, 8).is_err());
        assert!(RenderSettings::new(10.0, 0).is_err());
        assert!(RenderSettings::new(f64::INFINITY, 1).is_err());
    }
}
