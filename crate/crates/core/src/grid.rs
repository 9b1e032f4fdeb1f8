//! Dense ego-centric semantic voxel grid.
//!
//! Axis convention: the first grid axis (H) runs along ego +x (forward),
//! the second (W) along +y (left) and the third (D) along +z (up). Cells are
//! half-open, `[origin + i·vs, origin + (i+1)·vs)`, so a point on a shared
//! face belongs to the cell with the larger index; the global max face is
//! outside the grid.

use std::fmt;
use std::io::{Cursor, Read};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Magic bytes opening every `.vxsg` file.
pub const VXSG_MAGIC: [u8; 4] = *b"VXSG";
/// Current `.vxsg` format version.
pub const VXSG_VERSION: u16 = 1;
/// Upper bound on the voxel count accepted by the reader (256 MiB of labels).
pub const MAX_VOXELS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bad magic: expected \"VXSG\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("dimension overflow: {0:?}")]
    DimensionOverflow([u64; 3]),
    #[error("truncated payload: {0}")]
    Truncated(&'static str),
    #[error("label {label} out of taxonomy range (taxonomy has {count} entries)")]
    LabelOutOfRange { label: u8, count: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Semantic class id. `0` is always empty space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u8);

impl LabelId {
    pub const EMPTY: LabelId = LabelId(0);

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub color: [u8; 3],
    pub is_foreground: bool,
}

impl LabelEntry {
    pub fn new(name: &str, color: [u8; 3], is_foreground: bool) -> Self {
        Self {
            name: name.to_owned(),
            color,
            is_foreground,
        }
    }
}

/// Ordered label table. Entry 0 is the black, background "empty" label and
/// non-empty colors are pairwise distinct, so a semantic map can be decoded
/// back to labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelEntry>", into = "Vec<LabelEntry>")]
pub struct LabelTaxonomy {
    entries: Vec<LabelEntry>,
}

impl LabelTaxonomy {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self, GridError> {
        let bad = |msg: String| Err(GridError::InvalidTaxonomy(msg));
        match entries.first() {
            None => return bad("taxonomy has no entries".into()),
            Some(e) if e.name != "empty" || e.color != [0, 0, 0] || e.is_foreground => {
                return bad("entry 0 must be (\"empty\", (0,0,0), background)".into())
            }
            _ => {}
        }
        if entries.len() > 256 {
            return bad(format!("{} entries do not fit u8 labels", entries.len()));
        }
        for (i, a) in entries.iter().enumerate() {
            if a.name.is_empty() || a.name.len() > 255 {
                return bad(format!("entry {i} name must be 1..=255 bytes"));
            }
            for b in &entries[i + 1..] {
                if a.name == b.name {
                    return bad(format!("duplicate name {:?}", a.name));
                }
                if i > 0 && a.color == b.color {
                    return bad(format!("duplicate color {:?}", a.color));
                }
            }
            if i > 0 && a.color == [0, 0, 0] {
                return bad(format!("non-empty label {:?} uses the empty color", a.name));
            }
        }
        Ok(Self { entries })
    }

    /// empty, road, building, vehicle, pedestrian, vegetation; vehicles and
    /// pedestrians are foreground.
    pub fn driving_default() -> Self {
        Self::new(vec![
            LabelEntry::new("empty", [0, 0, 0], false),
            LabelEntry::new("road", [128, 64, 128], false),
            LabelEntry::new("building", [70, 70, 70], false),
            LabelEntry::new("vehicle", [0, 0, 142], true),
            LabelEntry::new("pedestrian", [220, 20, 60], true),
            LabelEntry::new("vegetation", [107, 142, 35], false),
        ])
        .expect("default taxonomy is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn get(&self, label: LabelId) -> Option<&LabelEntry> {
        self.entries.get(label.index())
    }

    pub fn contains(&self, label: LabelId) -> bool {
        label.index() < self.entries.len()
    }

    pub fn color(&self, label: LabelId) -> [u8; 3] {
        self.entries[label.index()].color
    }

    pub fn is_foreground(&self, label: LabelId) -> bool {
        self.entries
            .get(label.index())
            .is_some_and(|e| e.is_foreground)
    }

    pub fn by_name(&self, name: &str) -> Option<LabelId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| LabelId(i as u8))
    }

    /// Inverse of the palette. Black always decodes to empty.
    pub fn label_of_color(&self, color: [u8; 3]) -> Option<LabelId> {
        self.entries
            .iter()
            .position(|e| e.color == color)
            .map(|i| LabelId(i as u8))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        serde_json::from_str(text).map_err(|e| GridError::InvalidTaxonomy(e.to_string()))
    }
}

impl TryFrom<Vec<LabelEntry>> for LabelTaxonomy {
    type Error = GridError;

    fn try_from(entries: Vec<LabelEntry>) -> Result<Self, Self::Error> {
        Self::new(entries)
    }
}

impl From<LabelTaxonomy> for Vec<LabelEntry> {
    fn from(t: LabelTaxonomy) -> Self {
        t.entries
    }
}

/// Voxel index `(i, j, k)` along (x, y, z).
pub type VoxelIndex = [usize; 3];

/// Placement of a grid in the ego frame. Stored in `f32`, which is what the
/// file format carries, so that serialization is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub origin: [f32; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], voxel_size: f32, origin: [f32; 3]) -> Result<Self, GridError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(GridError::InvalidGeometry(format!("zero dimension in {dims:?}")));
        }
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(GridError::InvalidGeometry(format!("voxel size {voxel_size}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(GridError::InvalidGeometry(format!("origin {origin:?}")));
        }
        let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        match count {
            Some(n) if n <= MAX_VOXELS => {}
            _ => return Err(GridError::DimensionOverflow(dims.map(|d| d as u64))),
        }
        Ok(Self {
            dims,
            voxel_size,
            origin,
        })
    }

    /// Ego-centric placement: centered on the ego origin in x/y, one voxel
    /// below `z = 0` so the bottom layer is the ground slab.
    pub fn ego_centric(dims: [usize; 3], voxel_size: f32) -> Result<Self, GridError> {
        let half = |n: usize| -(n as f32) * voxel_size / 2.0;
        Self::new(dims, voxel_size, [half(dims[0]), half(dims[1]), -voxel_size])
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn vs(&self) -> f64 {
        self.voxel_size as f64
    }

    #[inline]
    pub fn aabb_min(&self) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] as f64,
            self.origin[1] as f64,
            self.origin[2] as f64,
        )
    }

    #[inline]
    pub fn aabb_max(&self) -> Vector3<f64> {
        let vs = self.vs();
        self.aabb_min()
            + Vector3::new(
                self.dims[0] as f64 * vs,
                self.dims[1] as f64 * vs,
                self.dims[2] as f64 * vs,
            )
    }

    #[inline]
    pub fn linear(&self, idx: VoxelIndex) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn contains_index(&self, idx: VoxelIndex) -> bool {
        idx[0] < self.dims[0] && idx[1] < self.dims[1] && idx[2] < self.dims[2]
    }

    /// Cell containing `point`, or `None` outside the half-open AABB.
    pub fn voxel_of(&self, point: &Vector3<f64>) -> Option<VoxelIndex> {
        let min = self.aabb_min();
        let vs = self.vs();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (point[a] - min[a]) / vs;
            if !(rel >= 0.0) {
                return None;
            }
            let i = rel.floor();
            if i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(idx)
    }

    /// Center of a cell. Panics if `idx` is out of range.
    pub fn center_of(&self, idx: VoxelIndex) -> Vector3<f64> {
        assert!(self.contains_index(idx), "voxel index {idx:?} out of {:?}", self.dims);
        let min = self.aabb_min();
        let vs = self.vs();
        Vector3::new(
            min.x + (idx[0] as f64 + 0.5) * vs,
            min.y + (idx[1] as f64 + 0.5) * vs,
            min.z + (idx[2] as f64 + 0.5) * vs,
        )
    }

    /// Min and max corners of a cell.
    pub fn cell_bounds(&self, idx: VoxelIndex) -> (Vector3<f64>, Vector3<f64>) {
        let min = self.aabb_min();
        let vs = self.vs();
        let lo = Vector3::new(
            min.x + idx[0] as f64 * vs,
            min.y + idx[1] as f64 * vs,
            min.z + idx[2] as f64 * vs,
        );
        (lo, lo + Vector3::repeat(vs))
    }
}

/// Immutable dense label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrid {
    geometry: GridGeometry,
    taxonomy: Arc<LabelTaxonomy>,
    labels: Vec<LabelId>,
}

impl SemanticGrid {
    pub fn from_labels(
        geometry: GridGeometry,
        taxonomy: Arc<LabelTaxonomy>,
        labels: Vec<LabelId>,
    ) -> Result<Self, GridError> {
        if labels.len() != geometry.voxel_count() {
            return Err(GridError::InvalidGeometry(format!(
                "{} labels for dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !taxonomy.contains(**l)) {
            return Err(GridError::LabelOutOfRange {
                label: bad.0,
                count: taxonomy.len(),
            });
        }
        Ok(Self {
            geometry,
            taxonomy,
            labels,
        })
    }

    pub fn empty(geometry: GridGeometry, taxonomy: Arc<LabelTaxonomy>) -> Self {
        let labels = vec![LabelId::EMPTY; geometry.voxel_count()];
        Self {
            geometry,
            taxonomy,
            labels,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.geometry.vs()
    }

    pub fn taxonomy(&self) -> &Arc<LabelTaxonomy> {
        &self.taxonomy
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, idx: VoxelIndex) -> LabelId {
        self.labels[self.geometry.linear(idx)]
    }

    pub fn voxel_of(&self, point: &Vector3<f64>) -> Option<VoxelIndex> {
        self.geometry.voxel_of(point)
    }

    pub fn center_of(&self, idx: VoxelIndex) -> Vector3<f64> {
        self.geometry.center_of(idx)
    }

    /// Label at a world point; empty outside the grid.
    pub fn label_at(&self, point: &Vector3<f64>) -> LabelId {
        self.voxel_of(point)
            .map_or(LabelId::EMPTY, |idx| self.label(idx))
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_empty()).count()
    }

    /// Mutable copy of the label array, for builders.
    pub fn into_builder(self) -> GridBuilder {
        GridBuilder {
            geometry: self.geometry,
            taxonomy: self.taxonomy,
            labels: self.labels,
        }
    }

    pub fn write_grid(&self) -> Vec<u8> {
        let tax = self.taxonomy.entries();
        let mut out = Vec::with_capacity(64 + tax.len() * 16 + self.labels.len());
        out.extend_from_slice(&VXSG_MAGIC);
        out.extend_from_slice(&VXSG_VERSION.to_le_bytes());
        for d in self.geometry.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.geometry.voxel_size.to_le_bytes());
        for o in self.geometry.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&(tax.len() as u16).to_le_bytes());
        for e in tax {
            out.push(e.name.len() as u8);
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.color);
            out.push(e.is_foreground as u8);
        }
        out.extend(self.labels.iter().map(|l| l.0));
        out
    }

    pub fn read_grid(bytes: &[u8]) -> Result<Self, GridError> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 4] = take(&mut r, "magic")?;
        if magic != VXSG_MAGIC {
            return Err(GridError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(take(&mut r, "version")?);
        if version != VXSG_VERSION {
            return Err(GridError::UnsupportedVersion(version));
        }
        let mut raw_dims = [0u64; 3];
        for d in &mut raw_dims {
            *d = u32::from_le_bytes(take(&mut r, "dims")?) as u64;
        }
        let count = raw_dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        if raw_dims.contains(&0) || !matches!(count, Some(n) if n <= MAX_VOXELS) {
            return Err(GridError::DimensionOverflow(raw_dims));
        }
        let voxel_size = f32::from_le_bytes(take(&mut r, "voxel size")?);
        let mut origin = [0f32; 3];
        for o in &mut origin {
            *o = f32::from_le_bytes(take(&mut r, "origin")?);
        }
        let geometry = GridGeometry::new(raw_dims.map(|d| d as usize), voxel_size, origin)?;

        let n_entries = u16::from_le_bytes(take(&mut r, "taxonomy count")?);
        let mut entries = Vec::with_capacity(n_entries as usize);
        for _ in 0..n_entries {
            let [len] = take::<1>(&mut r, "taxonomy name length")?;
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)
                .map_err(|_| GridError::Truncated("taxonomy name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| GridError::InvalidTaxonomy("label name is not UTF-8".into()))?;
            let color: [u8; 3] = take(&mut r, "taxonomy color")?;
            let [fg] = take::<1>(&mut r, "taxonomy flag")?;
            entries.push(LabelEntry {
                name,
                color,
                is_foreground: fg != 0,
            });
        }
        let taxonomy = Arc::new(LabelTaxonomy::new(entries)?);

        let start = r.position() as usize;
        let n = geometry.voxel_count();
        let payload = bytes
            .get(start..start + n)
            .ok_or(GridError::Truncated("label payload"))?;
        if bytes.len() > start + n {
            return Err(GridError::TrailingBytes(bytes.len() - start - n));
        }
        let labels = payload.iter().map(|&b| LabelId(b)).collect();
        Self::from_labels(geometry, taxonomy, labels)
    }

    /// SHA-256 of the `.vxsg` serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.write_grid()))
    }
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>, what: &'static str) -> Result<[u8; N], GridError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| GridError::Truncated(what))?;
    Ok(buf)
}

/// Mutable label array that freezes into a [`SemanticGrid`].
#[derive(Clone, Debug)]
pub struct GridBuilder {
    geometry: GridGeometry,
    taxonomy: Arc<LabelTaxonomy>,
    labels: Vec<LabelId>,
}

impl GridBuilder {
    pub fn new(geometry: GridGeometry, taxonomy: Arc<LabelTaxonomy>) -> Self {
        SemanticGrid::empty(geometry, taxonomy).into_builder()
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn set(&mut self, idx: VoxelIndex, label: LabelId) {
        assert!(self.taxonomy.contains(label), "label {label} not in taxonomy");
        let i = self.geometry.linear(idx);
        self.labels[i] = label;
    }

    pub fn get(&self, idx: VoxelIndex) -> LabelId {
        self.labels[self.geometry.linear(idx)]
    }

    /// Fill the inclusive-exclusive index box `[lo, hi)`, clipped to the grid.
    pub fn fill_box(&mut self, lo: VoxelIndex, hi: VoxelIndex, label: LabelId) {
        let hi = [0, 1, 2].map(|a| hi[a].min(self.geometry.dims[a]));
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    self.set([i, j, k], label);
                }
            }
        }
    }

    pub fn build(self) -> SemanticGrid {
        SemanticGrid {
            geometry: self.geometry,
            taxonomy: self.taxonomy,
            labels: self.labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3], vs: f32, origin: [f32; 3]) -> GridGeometry {
        GridGeometry::new(dims, vs, origin).unwrap()
    }

    fn tax() -> Arc<LabelTaxonomy> {
        Arc::new(LabelTaxonomy::driving_default())
    }

    #[test]
    fn voxel_of_corners() {
        let g = geom([4, 4, 4], 1.0, [0.0; 3]);
        assert_eq!(g.voxel_of(&Vector3::zeros()), Some([0, 0, 0]));
        assert_eq!(g.voxel_of(&Vector3::new(4.0, 4.0, 4.0)), None);
        assert_eq!(g.voxel_of(&Vector3::new(2.5, 0.5, 0.5)), Some([2, 0, 0]));
        // shared face goes to the larger index
        assert_eq!(g.voxel_of(&Vector3::new(2.0, 0.5, 0.5)), Some([2, 0, 0]));
        assert_eq!(g.voxel_of(&Vector3::new(-1e-12, 0.5, 0.5)), None);
    }

    #[test]
    fn center_of_examples() {
        let g = geom([4, 4, 4], 1.0, [0.0; 3]);
        assert_eq!(g.center_of([0, 0, 0]), Vector3::new(0.5, 0.5, 0.5));
        let g = geom([4, 4, 4], 0.5, [-2.0, -2.0, 0.0]);
        assert_eq!(g.center_of([3, 1, 0]), Vector3::new(-0.25, -1.25, 0.25));
    }

    #[test]
    #[should_panic]
    fn center_of_out_of_range_panics() {
        geom([2, 2, 2], 1.0, [0.0; 3]).center_of([2, 0, 0]);
    }

    #[test]
    fn center_round_trip_all_cells() {
        let g = geom([5, 3, 7], 0.37, [-1.3, 2.1, -0.4]);
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..7 {
                    assert_eq!(g.voxel_of(&g.center_of([i, j, k])), Some([i, j, k]));
                }
            }
        }
    }

    #[test]
    fn zero_grid_payload_layout() {
        let grid = SemanticGrid::empty(geom([2, 2, 2], 1.0, [0.0; 3]), tax());
        let bytes = grid.write_grid();
        let header = 4 + 2 + 12 + 4 + 12 + 2
            + grid
                .taxonomy()
                .entries()
                .iter()
                .map(|e| 1 + e.name.len() + 3 + 1)
                .sum::<usize>();
        assert_eq!(bytes.len(), header + 8);
        assert!(bytes[header..].iter().all(|&b| b == 0));
        assert_eq!(&bytes[..4], b"VXSG");
    }

    #[test]
    fn payload_is_x_major() {
        let mut b = GridBuilder::new(geom([2, 3, 4], 1.0, [0.0; 3]), tax());
        b.set([1, 0, 0], LabelId(2));
        b.set([0, 0, 1], LabelId(3));
        let bytes = b.build().write_grid();
        let payload = &bytes[bytes.len() - 24..];
        assert_eq!(payload[12], 2);
        assert_eq!(payload[1], 3);
    }

    #[test]
    fn read_errors_are_distinct() {
        let mut b = GridBuilder::new(geom([2, 2, 2], 1.0, [0.0; 3]), tax());
        b.set([1, 1, 1], LabelId(4));
        let bytes = b.build().write_grid();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SemanticGrid::read_grid(&bad), Err(GridError::BadMagic(_))));

        assert!(matches!(
            SemanticGrid::read_grid(&bytes[..bytes.len() - 1]),
            Err(GridError::Truncated("label payload"))
        ));
        assert!(matches!(
            SemanticGrid::read_grid(&bytes[..10]),
            Err(GridError::Truncated(_))
        ));

        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 6;
        assert!(matches!(
            SemanticGrid::read_grid(&bad),
            Err(GridError::LabelOutOfRange { label: 6, count: 6 })
        ));

        let mut bad = bytes.clone();
        bad[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            SemanticGrid::read_grid(&bad),
            Err(GridError::DimensionOverflow(_))
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(SemanticGrid::read_grid(&bad), Err(GridError::TrailingBytes(1))));
    }

    #[test]
    fn taxonomy_validation() {
        let t = LabelTaxonomy::driving_default();
        assert_eq!(t.len(), 6);
        assert!(t.is_foreground(LabelId(3)) && t.is_foreground(LabelId(4)));
        assert!(!t.is_foreground(LabelId(1)));
        assert_eq!(t.label_of_color([220, 20, 60]), Some(LabelId(4)));

        let mut entries = t.entries().to_vec();
        entries[2].color = entries[1].color;
        assert!(LabelTaxonomy::new(entries).is_err());
        let mut entries = t.entries().to_vec();
        entries[0].name = "void".into();
        assert!(LabelTaxonomy::new(entries).is_err());
        let mut entries = t.entries().to_vec();
        entries[3].name = "road".into();
        assert!(LabelTaxonomy::new(entries).is_err());

        let back = LabelTaxonomy::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert!(LabelTaxonomy::from_json(r#"[{"name":"x","color":[0,0,0],"is_foreground":false}]"#).is_err());
    }

    #[test]
    fn geometry_rejects_degenerate() {
        assert!(GridGeometry::new([0, 1, 1], 1.0, [0.0; 3]).is_err());
        assert!(GridGeometry::new([1, 1, 1], 0.0, [0.0; 3]).is_err());
        assert!(GridGeometry::new([1, 1, 1], f32::NAN, [0.0; 3]).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = SemanticGrid> {
        (1usize..6, 1usize..6, 1usize..6, 0.05f32..3.0, prop::array::uniform3(-20f32..20.0))
            .prop_flat_map(|(h, w, d, vs, origin)| {
                prop::collection::vec(0u8..6, h * w * d).prop_map(move |labels| {
                    SemanticGrid::from_labels(
                        GridGeometry::new([h, w, d], vs, origin).unwrap(),
                        Arc::new(LabelTaxonomy::driving_default()),
                        labels.into_iter().map(LabelId).collect(),
                    )
                    .unwrap()
                })
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trip(grid in arb_grid()) {
            let bytes = grid.write_grid();
            let back = SemanticGrid::read_grid(&bytes).unwrap();
            prop_assert_eq!(&back, &grid);
            prop_assert_eq!(back.write_grid(), bytes);
        }

        #[test]
        fn point_lies_in_its_cell(
            dims in prop::array::uniform3(1usize..10),
            vs in 0.1f32..2.0,
            origin in prop::array::uniform3(-5f32..5.0),
            frac in prop::array::uniform3(0.0f64..1.0),
        ) {
            let g = GridGeometry::new(dims, vs, origin).unwrap();
            let (min, max) = (g.aabb_min(), g.aabb_max());
            let p = Vector3::new(
                min.x + frac[0] * (max.x - min.x),
                min.y + frac[1] * (max.y - min.y),
                min.z + frac[2] * (max.z - min.z),
            );
            let idx = g.voxel_of(&p).expect("in-bounds point");
            let (lo, hi) = g.cell_bounds(idx);
            for a in 0..3 {
                prop_assert!(lo[a] <= p[a] + 1e-12 && p[a] < hi[a] + 1e-12);
            }
        }
    }
}
