//! Pinhole cameras and the multi-camera ego rig.
//!
//! Camera frame: +z forward, +x right, +y down. Extrinsics map camera
//! coordinates to the ego frame. Rays are parameterized by Euclidean
//! distance from the camera center.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid extrinsics: {0}")]
    Extrinsics(String),
    #[error("invalid rig: {0}")]
    Rig(String),
    #[error("pixel ({0}, {1}) is not finite")]
    NonFinitePixel(f64, f64),
    #[error("rig config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let err = |m: String| Err(CameraError::Intrinsics(m));
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return err(format!("focal lengths ({}, {})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return err(format!("image size {}x{}", self.width, self.height));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return err(format!("principal point ({}, {})", self.cx, self.cy));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn scaled(&self, factor: f64) -> Result<Self, CameraError> {
        let width = (self.width as f64 * factor).round() as u32;
        let height = (self.height as f64 * factor).round() as u32;
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    /// Camera-to-ego rotation; columns are the camera axes in the ego frame.
    pub rotation: Matrix3<f64>,
    /// Camera center in the ego frame, meters.
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        let extr = Self {
            rotation,
            translation,
        };
        extr.validate()?;
        Ok(extr)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(CameraError::Extrinsics("non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(CameraError::Extrinsics(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(CameraError::Extrinsics(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    /// Horizontal camera looking along ego yaw `yaw` (radians, 0 = +x,
    /// counter-clockwise towards +y), mounted at `translation`.
    pub fn looking_at_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let right = Vector3::new(s, -c, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let forward = Vector3::new(c, s, 0.0);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    #[inline]
    pub fn at(&self, distance: f64) -> Vector3<f64> {
        self.origin + self.direction * distance
    }
}

/// Ray through continuous pixel coordinates `(u, v)`. Pixel `(col, row)`
/// covers `[col, col+1) × [row, row+1)`; its center is at `+0.5`.
pub fn pixel_ray(intr: &Intrinsics, extr: &Extrinsics, u: f64, v: f64) -> Result<Ray, CameraError> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(CameraError::NonFinitePixel(u, v));
    }
    let cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    Ok(Ray {
        origin: extr.translation,
        direction: (extr.rotation * cam).normalize(),
    })
}

/// Ray through the center of integer pixel `(col, row)`.
#[inline]
pub fn pixel_center_ray(intr: &Intrinsics, extr: &Extrinsics, col: u32, row: u32) -> Ray {
    let cam = Vector3::new(
        (col as f64 + 0.5 - intr.cx) / intr.fx,
        (row as f64 + 0.5 - intr.cy) / intr.fy,
        1.0,
    );
    Ray {
        origin: extr.translation,
        direction: (extr.rotation * cam).normalize(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Euclidean distance from the camera center.
    pub distance: f64,
}

/// World point to pixel. `None` behind the camera or outside the image.
pub fn project(intr: &Intrinsics, extr: &Extrinsics, point: &Vector3<f64>) -> Option<Projection> {
    let rel = point - extr.translation;
    let cam = extr.rotation.transpose() * rel;
    if !(cam.z > 0.0) {
        return None;
    }
    let u = intr.fx * cam.x / cam.z + intr.cx;
    let v = intr.fy * cam.y / cam.z + intr.cy;
    if !(0.0..=intr.width as f64).contains(&u) || !(0.0..=intr.height as f64).contains(&v) {
        return None;
    }
    Some(Projection {
        u,
        v,
        distance: rel.norm(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraView {
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray, CameraError> {
        pixel_ray(&self.intrinsics, &self.extrinsics, u, v)
    }

    pub fn project(&self, point: &Vector3<f64>) -> Option<Projection> {
        project(&self.intrinsics, &self.extrinsics, point)
    }
}

/// JSON form of one rig view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major camera-to-ego rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    views: Vec<CameraView>,
}

/// Names of the default rig, in yaw order (60° apart, counter-clockwise).
pub const DEFAULT_VIEW_NAMES: [&str; 6] = [
    "front",
    "front_left",
    "back_left",
    "back",
    "back_right",
    "front_right",
];

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self, CameraError> {
        if views.is_empty() {
            return Err(CameraError::Rig("rig has no views".into()));
        }
        for (i, v) in views.iter().enumerate() {
            if views[..i].iter().any(|w| w.name == v.name) {
                return Err(CameraError::Rig(format!("duplicate view name {:?}", v.name)));
            }
            v.intrinsics.validate()?;
            v.extrinsics.validate()?;
        }
        Ok(Self { views })
    }

    /// Six horizontal cameras at 60° yaw increments, 1.5 m above the ground,
    /// 0.5 m out from the ego center, ~70° horizontal field of view at 160×96.
    pub fn default_rig() -> Self {
        let intr = Intrinsics::new(112.0, 112.0, 80.0, 48.0, 160, 96).expect("valid intrinsics");
        let views = DEFAULT_VIEW_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let yaw = (i as f64 * 60.0).to_radians();
                let mount = Vector3::new(0.5 * yaw.cos(), 0.5 * yaw.sin(), 1.5);
                CameraView {
                    name: (*name).to_owned(),
                    intrinsics: intr,
                    extrinsics: Extrinsics::looking_at_yaw(yaw, mount),
                }
            })
            .collect();
        Self::new(views).expect("default rig is valid")
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn view(&self, name: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.name == name)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Keep only the named views, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self, CameraError> {
        let views = names
            .iter()
            .map(|n| {
                self.view(n)
                    .cloned()
                    .ok_or_else(|| CameraError::Rig(format!("no view named {n:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(views)
    }

    /// Every view rescaled to a different resolution.
    pub fn scaled(&self, factor: f64) -> Result<Self, CameraError> {
        let views = self
            .views
            .iter()
            .map(|v| {
                Ok(CameraView {
                    intrinsics: v.intrinsics.scaled(factor)?,
                    ..v.clone()
                })
            })
            .collect::<Result<Vec<_>, CameraError>>()?;
        Self::new(views)
    }

    pub fn to_config(&self) -> Vec<ViewConfig> {
        self.views
            .iter()
            .map(|v| {
                let r = &v.extrinsics.rotation;
                ViewConfig {
                    name: v.name.clone(),
                    fx: v.intrinsics.fx,
                    fy: v.intrinsics.fy,
                    cx: v.intrinsics.cx,
                    cy: v.intrinsics.cy,
                    width: v.intrinsics.width,
                    height: v.intrinsics.height,
                    rotation: [
                        r[(0, 0)], r[(0, 1)], r[(0, 2)],
                        r[(1, 0)], r[(1, 1)], r[(1, 2)],
                        r[(2, 0)], r[(2, 1)], r[(2, 2)],
                    ],
                    translation: [v.extrinsics.translation.x, v.extrinsics.translation.y, v.extrinsics.translation.z],
                }
            })
            .collect()
    }

    pub fn from_config(config: &[ViewConfig]) -> Result<Self, CameraError> {
        let views = config
            .iter()
            .map(|c| {
                Ok(CameraView {
                    name: c.name.clone(),
                    intrinsics: Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?,
                    extrinsics: Extrinsics::new(
                        Matrix3::from_row_slice(&c.rotation),
                        Vector3::from(c.translation),
                    )?,
                })
            })
            .collect::<Result<Vec<_>, CameraError>>()?;
        Self::new(views)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_config()).expect("rig serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CameraError> {
        let config: Vec<ViewConfig> = serde_json::from_str(text)?;
        Self::from_config(&config)
    }

    /// SHA-256 of the compact JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_config()).expect("rig serializes");
        hex::encode(Sha256::digest(json))
    }
}
