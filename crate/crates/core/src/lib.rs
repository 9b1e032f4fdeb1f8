//! Semantic voxel grids, camera rigs, voxel ray casting, condition-map
//! rendering and synthetic scene generation.

pub mod camera;
pub mod conditions;
pub mod grid;
pub mod image;
pub mod pnm;
pub mod raycast;
pub mod scenegen;

pub use camera::{CameraRig, CameraView, Extrinsics, Intrinsics, Ray};
pub use conditions::{ConditionStack, RenderSettings, Renderer};
pub use grid::{GridGeometry, LabelId, LabelTaxonomy, SemanticGrid};
pub use raycast::{CasterRegistry, DdaCaster, RayCaster, RayHit, RayTrace, SamplingCaster};
pub use scenegen::{generate_scene, SceneConfig, TemporalScene};
