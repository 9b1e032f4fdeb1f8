//! Condition-group encoders. Each group turns a subset of the condition
//! maps into a feature map; groups are looked up by name at model build time.

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use super::feat::{silu, silu_backward, Feat};
use super::layers::Conv2d;
use super::params::{Grads, ParamRole, ParamStore};

/// Condition maps of a clip at model resolution, frames view-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInputs {
    /// Palette colors scaled to `[0, 1]`, 3 channels.
    pub semantic: Feat,
    /// Normalized depth, 1 channel (1 = miss).
    pub depth: Feat,
    /// Palette colors of every MPI plane, `3·P` channels.
    pub mpi: Feat,
    /// Normalized hit coordinates, 3 channels (0 on misses).
    pub coordinate: Feat,
}

impl CondInputs {
    /// All maps replaced by zeros: the unconditional input.
    pub fn zeroed(&self) -> Self {
        Self {
            semantic: self.semantic.zeros_like(),
            depth: self.depth.zeros_like(),
            mpi: self.mpi.zeros_like(),
            coordinate: self.coordinate.zeros_like(),
        }
    }

    pub fn frames(&self) -> usize {
        self.semantic.f
    }

    pub fn planes(&self) -> usize {
        self.mpi.c / 3
    }

    /// The listed frames of every map, in order.
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let pick = |f: &Feat| {
            let mut data = Vec::with_capacity(frames.len() * f.c * f.area());
            for &j in frames {
                data.extend_from_slice(f.frame(j));
            }
            Feat::from_vec(frames.len(), f.c, f.h, f.w, data)
        };
        Self {
            semantic: pick(&self.semantic),
            depth: pick(&self.depth),
            mpi: pick(&self.mpi),
            coordinate: pick(&self.coordinate),
        }
    }
}

/// Build-time sizes shared by all groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupSpec {
    /// Output channels of every group.
    pub width: usize,
    pub planes: usize,
}

pub trait ConditionGroup: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn out_channels(&self) -> usize;

    fn forward(&self, p: &ParamStore, cond: &CondInputs) -> Feat;

    /// Accumulates parameter gradients for output gradient `gy`.
    fn backward(&self, p: &ParamStore, g: &mut Grads, cond: &CondInputs, gy: &Feat);
}

/// Semantic colors and depth, channel-concatenated and encoded by one
/// shared 3×3 convolution.
#[derive(Debug)]
pub struct SemDepGroup {
    conv: Conv2d,
}

impl SemDepGroup {
    pub const NAME: &'static str = "sem_dep";

    pub fn build(store: &mut ParamStore, spec: &GroupSpec, rng: &mut Xoshiro256PlusPlus) -> Box<dyn ConditionGroup> {
        Box::new(Self {
            conv: Conv2d::new(store, "group.sem_dep.conv", ParamRole::Encoder, (4, spec.width, 3), 1.0, rng),
        })
    }

    fn input(cond: &CondInputs) -> Feat {
        Feat::concat_channels(&[&cond.semantic, &cond.depth])
    }
}

impl ConditionGroup for SemDepGroup {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn out_channels(&self) -> usize {
        self.conv.cout
    }

    fn forward(&self, p: &ParamStore, cond: &CondInputs) -> Feat {
        silu(&self.conv.forward(p, &Self::input(cond)))
    }

    fn backward(&self, p: &ParamStore, g: &mut Grads, cond: &CondInputs, gy: &Feat) {
        let x = Self::input(cond);
        let pre = self.conv.forward(p, &x);
        self.conv.backward(p, g, &x, &silu_backward(&pre, gy));
    }
}

/// MPI planes through a dedicated pointwise path and coordinates through a
/// 3×3 convolution; the two halves are channel-concatenated.
#[derive(Debug)]
pub struct MpiCoordGroup {
    mpi: Conv2d,
    coord: Conv2d,
}

impl MpiCoordGroup {
    pub const NAME: &'static str = "mpi_coor";

    pub fn build(store: &mut ParamStore, spec: &GroupSpec, rng: &mut Xoshiro256PlusPlus) -> Box<dyn ConditionGroup> {
        let half = spec.width / 2;
        Box::new(Self {
            mpi: Conv2d::new(store, "group.mpi_coor.mpi", ParamRole::Encoder, (3 * spec.planes, half, 1), 1.0, rng),
            coord: Conv2d::new(
                store,
                "group.mpi_coor.coord",
                ParamRole::Encoder,
                (3, spec.width - half, 3),
                1.0,
                rng,
            ),
        })
    }
}

impl ConditionGroup for MpiCoordGroup {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn out_channels(&self) -> usize {
        self.mpi.cout + self.coord.cout
    }

    fn forward(&self, p: &ParamStore, cond: &CondInputs) -> Feat {
        let a = silu(&self.mpi.forward(p, &cond.mpi));
        let b = silu(&self.coord.forward(p, &cond.coordinate));
        Feat::concat_channels(&[&a, &b])
    }

    fn backward(&self, p: &ParamStore, g: &mut Grads, cond: &CondInputs, gy: &Feat) {
        let parts = gy.split_channels(&[self.mpi.cout, self.coord.cout]);
        let pre = self.mpi.forward(p, &cond.mpi);
        self.mpi.backward(p, g, &cond.mpi, &silu_backward(&pre, &parts[0]));
        let pre = self.coord.forward(p, &cond.coordinate);
        self.coord.backward(p, g, &cond.coordinate, &silu_backward(&pre, &parts[1]));
    }
}

pub type GroupFactory = fn(&mut ParamStore, &GroupSpec, &mut Xoshiro256PlusPlus) -> Box<dyn ConditionGroup>;

#[derive(Debug, Error, PartialEq)]
#[error("unknown condition group {name:?} (known: {known})")]
pub struct UnknownGroup {
    pub name: String,
    pub known: String,
}

/// Condition-group encoders selectable by name.
#[derive(Clone, Debug)]
pub struct GroupRegistry {
    factories: BTreeMap<String, GroupFactory>,
}

impl Default for GroupRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl GroupRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(SemDepGroup::NAME, SemDepGroup::build);
        r.register(MpiCoordGroup::NAME, MpiCoordGroup::build);
        r
    }

    pub fn register(&mut self, name: &str, factory: GroupFactory) {
        self.factories.insert(name.to_owned(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(
        &self,
        name: &str,
        store: &mut ParamStore,
        spec: &GroupSpec,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<Box<dyn ConditionGroup>, UnknownGroup> {
        match self.factories.get(name) {
            Some(f) => Ok(f(store, spec, rng)),
            None => Err(UnknownGroup {
                name: name.to_owned(),
                known: self.names().join(", "),
            }),
        }
    }
}
