use rand::Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which part of the network a parameter belongs to. Training modes select
/// the trainable subset by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Base,
    Control,
    Encoder,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub value: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, role: ParamRole, init: Init, rng: &mut Xoshiro256PlusPlus) -> ParamId {
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let n = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Scaled { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        self.params.push(Param { name, shape, role, value });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// SHA-256 over names and exact values of the parameters with the
    /// given roles, in registration order.
    pub fn checksum(&self, roles: &[ParamRole]) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| roles.contains(&p.role)) {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers matching a [`ParamStore`] entry for entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
