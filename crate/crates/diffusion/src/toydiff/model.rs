//! The toy denoiser: a stem, a chain of residual base blocks, a parallel
//! chain of control blocks fed with fused condition features, optional
//! adapters on control outputs, and zero-initialized projections that add
//! control features into the base chain.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adapter::{Adapter, AdapterCache, AdapterConfig};
use super::feat::{silu, silu_backward, Feat};
use super::groups::{CondInputs, ConditionGroup, GroupRegistry, GroupSpec, UnknownGroup};
use super::layers::{Conv2d, ResBlock, ResCache};
use super::params::{Grads, Init, ParamId, ParamRole, ParamStore};

const TIME_FEATURES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    UnknownGroup(#[from] UnknownGroup),
    #[error("input shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub views: usize,
    pub frames_per_view: usize,
    pub height: usize,
    pub width: usize,
    /// Number of base blocks; the control branch has the same count.
    pub blocks: usize,
    pub planes: usize,
    /// Condition-group encoder names; empty for an unconditioned model.
    pub groups: Vec<String>,
    pub adapter: AdapterConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            hidden: 8,
            views: 2,
            frames_per_view: 4,
            height: 24,
            width: 40,
            blocks: 2,
            planes: 8,
            groups: vec!["sem_dep".into(), "mpi_coor".into()],
            adapter: AdapterConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn frames(&self) -> usize {
        self.views * self.frames_per_view
    }

    pub fn validate(&self, registry: &GroupRegistry) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let sizes = [
            ("latent_channels", self.latent_channels),
            ("hidden", self.hidden),
            ("views", self.views),
            ("frames_per_view", self.frames_per_view),
            ("height", self.height),
            ("width", self.width),
            ("blocks", self.blocks),
            ("planes", self.planes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be positive"));
        }
        if self.hidden < 2 {
            return err("hidden must be at least 2".into());
        }
        if self.adapter.heads == 0 || self.hidden % self.adapter.heads != 0 {
            return err(format!("hidden {} is not divisible by {} heads", self.hidden, self.adapter.heads));
        }
        if self.adapter.spatial_kernel % 2 == 0 {
            return err("adapter spatial_kernel must be odd".into());
        }
        if let Some(b) = self.adapter.blocks.iter().find(|&&b| b >= self.blocks) {
            return err(format!("adapter block {b} out of range for {} blocks", self.blocks));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if !registry.contains(g) {
                return Err(UnknownGroup {
                    name: g.clone(),
                    known: registry.names().join(", "),
                }
                .into());
            }
            if self.groups[..i].contains(g) {
                return err(format!("condition group {g:?} listed twice"));
            }
        }
        Ok(())
    }
}

/// Which optional paths take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// When false the condition maps are replaced by zeros.
    pub conditions: bool,
    pub adapter: bool,
}

impl ForwardOptions {
    pub const FULL: Self = Self {
        conditions: true,
        adapter: true,
    };
    pub const NO_ADAPTER: Self = Self {
        conditions: true,
        adapter: false,
    };
}

#[derive(Debug)]
pub struct ToyDenoiser {
    config: ModelConfig,
    params: ParamStore,
    stem: Conv2d,
    time_w: ParamId,
    time_b: ParamId,
    view_emb: ParamId,
    base: Vec<ResBlock>,
    control: Vec<ResBlock>,
    proj: Vec<Conv2d>,
    adapters: Vec<Option<Adapter>>,
    groups: Vec<Box<dyn ConditionGroup>>,
    fusion: Option<Conv2d>,
    head: Conv2d,
}

/// Activations of one forward pass, consumed by [`ToyDenoiser::backward`].
#[derive(Debug)]
pub struct Trace {
    z: Feat,
    t: Vec<f64>,
    cond: Option<CondInputs>,
    fusion_in: Option<Feat>,
    base: Vec<ResCache>,
    control: Vec<ResCache>,
    adapters: Vec<Option<AdapterCache>>,
    /// Control block outputs before any adapter.
    control_out: Vec<Feat>,
    injected: Vec<Feat>,
    last: Feat,
}

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for i in 0..TIME_FEATURES / 2 {
        let a = std::f64::consts::PI * (1 << i) as f64 * t;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Fixed sinusoidal encoding of a frame's position within its view.
fn frame_encoding(t: usize, c: usize, channels: usize) -> f64 {
    let rate = 1.0 / 100f64.powf((c / 2 * 2) as f64 / channels as f64);
    let a = t as f64 * rate;
    0.1 * if c % 2 == 0 { a.sin() } else { a.cos() }
}

impl ToyDenoiser {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        Self::with_registry(config, &GroupRegistry::with_builtins())
    }

    pub fn with_registry(config: ModelConfig, registry: &GroupRegistry) -> Result<Self, ModelError> {
        config.validate(registry)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (cz, ch) = (config.latent_channels, config.hidden);
        let stem = Conv2d::new(&mut store, "stem", ParamRole::Base, (cz, ch, 3), 1.0, &mut rng);
        let time_w = store.add(
            "time.weight".into(),
            vec![ch, TIME_FEATURES],
            ParamRole::Base,
            Init::Scaled {
                fan_in: TIME_FEATURES,
                gain: 1.0,
            },
            &mut rng,
        );
        let time_b = store.add("time.bias".into(), vec![ch], ParamRole::Base, Init::Zeros, &mut rng);
        let view_emb = store.add(
            "view_embedding".into(),
            vec![config.views, ch],
            ParamRole::Base,
            Init::Scaled { fan_in: 1, gain: 0.1 },
            &mut rng,
        );
        let base = (0..config.blocks)
            .map(|i| ResBlock::new(&mut store, &format!("base.{i}"), ParamRole::Base, ch, &mut rng))
            .collect();
        let control = (0..config.blocks)
            .map(|i| ResBlock::new(&mut store, &format!("control.{i}"), ParamRole::Control, ch, &mut rng))
            .collect();
        let proj = (0..config.blocks)
            .map(|i| Conv2d::new(&mut store, &format!("control.{i}.proj"), ParamRole::Control, (ch, ch, 1), 0.0, &mut rng))
            .collect();
        let adapters = (0..config.blocks)
            .map(|i| {
                config
                    .adapter
                    .blocks
                    .contains(&i)
                    .then(|| Adapter::new(&mut store, &format!("adapter.{i}"), ch, &config.adapter, &mut rng))
            })
            .collect();
        let spec = GroupSpec {
            width: ch,
            planes: config.planes,
        };
        let groups = config
            .groups
            .iter()
            .map(|g| registry.build(g, &mut store, &spec, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let fusion = (!groups.is_empty()).then(|| {
            let cin = groups.iter().map(|g| g.out_channels()).sum();
            Conv2d::new(&mut store, "fusion", ParamRole::Encoder, (cin, ch, 1), 0.0, &mut rng)
        });
        let head = Conv2d::new(&mut store, "head", ParamRole::Base, (ch, cz, 3), 0.5, &mut rng);
        Ok(Self {
            config,
            params: store,
            stem,
            time_w,
            time_b,
            view_emb,
            base,
            control,
            proj,
            adapters,
            groups,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name()).collect()
    }

    fn check_inputs(&self, z: &Feat, t: &[f64], cond: &CondInputs) -> Result<(), ModelError> {
        let cfg = &self.config;
        let shape_err = |m: String| Err(ModelError::Shape(m));
        if z.c != cfg.latent_channels {
            return shape_err(format!("latent has {} channels, model expects {}", z.c, cfg.latent_channels));
        }
        if z.f == 0 || z.f % cfg.views != 0 {
            return shape_err(format!("{} frames do not split into {} views", z.f, cfg.views));
        }
        if t.len() != z.f || t.iter().any(|v| !v.is_finite()) {
            return shape_err(format!("{} timesteps for {} frames", t.len(), z.f));
        }
        let maps = [
            ("semantic", &cond.semantic, 3),
            ("depth", &cond.depth, 1),
            ("mpi", &cond.mpi, 3 * cfg.planes),
            ("coordinate", &cond.coordinate, 3),
        ];
        for (name, m, c) in maps {
            if m.shape() != [z.f, c, z.h, z.w] {
                return shape_err(format!(
                    "{name} map {:?} does not match latent {:?} with {c} channels",
                    m.shape(),
                    z.shape()
                ));
            }
        }
        Ok(())
    }

    /// Predicted velocity for latent `z` at per-frame times `t`.
    pub fn forward(&self, z: &Feat, t: &[f64], cond: &CondInputs, opts: ForwardOptions) -> Result<Feat, ModelError> {
        Ok(self.forward_trace(z, t, cond, opts)?.0)
    }

    pub fn forward_trace(
        &self,
        z: &Feat,
        t: &[f64],
        cond: &CondInputs,
        opts: ForwardOptions,
    ) -> Result<(Feat, Trace), ModelError> {
        self.check_inputs(z, t, cond)?;
        let p = &self.params;
        let ch = self.config.hidden;
        let run = z.f / self.config.views;

        let mut h = self.stem.forward(p, z);
        let (tw, tb, ve) = (p.value(self.time_w), p.value(self.time_b), p.value(self.view_emb));
        for j in 0..z.f {
            let tf = time_features(t[j]);
            let (v, pos) = (j / run, j % run);
            for c in 0..ch {
                let shift = tb[c]
                    + tw[c * TIME_FEATURES..(c + 1) * TIME_FEATURES]
                        .iter()
                        .zip(&tf)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                    + ve[v * ch + c]
                    + frame_encoding(pos, c, ch);
                h.plane_mut(j, c).iter_mut().for_each(|x| *x += shift);
            }
        }

        let cond = if opts.conditions { cond.clone() } else { cond.zeroed() };
        let (mut c, fusion_in, cond) = match &self.fusion {
            Some(fusion) => {
                let feats: Vec<Feat> = self.groups.iter().map(|g| g.forward(p, &cond)).collect();
                let fin = Feat::concat_channels(&feats.iter().collect::<Vec<_>>());
                let fused = fusion.forward(p, &fin);
                (h.add(&fused), Some(fin), Some(cond))
            }
            None => (h.clone(), None, None),
        };

        let mut base_caches = Vec::with_capacity(self.config.blocks);
        let mut ctrl_caches = Vec::with_capacity(self.config.blocks);
        let mut adapter_caches = Vec::with_capacity(self.config.blocks);
        let mut control_out = Vec::with_capacity(self.config.blocks);
        let mut injected = Vec::with_capacity(self.config.blocks);
        for i in 0..self.config.blocks {
            let (hb, bc) = self.base[i].forward(p, &h);
            let (cc_out, cc) = self.control[i].forward(p, &c);
            let (c_next, ac) = match (&self.adapters[i], opts.adapter) {
                (Some(ad), true) => {
                    let (o, cache) = ad.forward(p, &cc_out, self.config.views);
                    (o, Some(cache))
                }
                _ => (cc_out.clone(), None),
            };
            control_out.push(cc_out);
            h = hb.add(&self.proj[i].forward(p, &c_next));
            base_caches.push(bc);
            ctrl_caches.push(cc);
            adapter_caches.push(ac);
            injected.push(c_next.clone());
            c = c_next;
        }
        let out = self.head.forward(p, &silu(&h));
        let trace = Trace {
            z: z.clone(),
            t: t.to_vec(),
            cond,
            fusion_in,
            base: base_caches,
            control: ctrl_caches,
            adapters: adapter_caches,
            control_out,
            injected,
            last: h,
        };
        Ok((out, trace))
    }

    /// Parameter gradients of `Σ g_out ⊙ forward(...)`.
    pub fn backward(&self, trace: &Trace, g_out: &Feat) -> Grads {
        let p = &self.params;
        let mut g = p.zero_grads();
        let ch = self.config.hidden;
        let g_act = self.head.backward(p, &mut g, &silu(&trace.last), g_out);
        let mut gh = silu_backward(&trace.last, &g_act);
        let mut gc: Option<Feat> = None;
        for i in (0..self.config.blocks).rev() {
            let mut g_inj = self.proj[i].backward(p, &mut g, &trace.injected[i], &gh);
            if let Some(next) = &gc {
                g_inj.add_assign(next);
            }
            let g_ctrl_out = match (&self.adapters[i], &trace.adapters[i]) {
                (Some(ad), Some(cache)) => ad.backward(p, &mut g, cache, &g_inj, self.config.views),
                _ => g_inj,
            };
            gc = Some(self.control[i].backward(p, &mut g, &trace.control[i], &g_ctrl_out));
            gh = self.base[i].backward(p, &mut g, &trace.base[i], &gh);
        }
        let gc = gc.expect("at least one block");
        // c0 = h0 + fused conditions
        gh.add_assign(&gc);
        if let (Some(fusion), Some(fin), Some(cond)) = (&self.fusion, &trace.fusion_in, &trace.cond) {
            let g_fin = fusion.backward(p, &mut g, fin, &gc);
            let sizes: Vec<usize> = self.groups.iter().map(|gr| gr.out_channels()).collect();
            for (group, gpart) in self.groups.iter().zip(g_fin.split_channels(&sizes)) {
                group.backward(p, &mut g, cond, &gpart);
            }
        }

        let z = &trace.z;
        let run = z.f / self.config.views;
        {
            let gtw = g.get_mut(self.time_w);
            for j in 0..z.f {
                let tf = time_features(trace.t[j]);
                for c in 0..ch {
                    let s: f64 = gh.plane(j, c).iter().sum();
                    for (k, f) in tf.iter().enumerate() {
                        gtw[c * TIME_FEATURES + k] += s * f;
                    }
                }
            }
        }
        let plane_sums: Vec<f64> = (0..z.f)
            .flat_map(|j| (0..ch).map(move |c| (j, c)))
            .map(|(j, c)| gh.plane(j, c).iter().sum())
            .collect();
        {
            let gtb = g.get_mut(self.time_b);
            for j in 0..z.f {
                for c in 0..ch {
                    gtb[c] += plane_sums[j * ch + c];
                }
            }
        }
        {
            let gve = g.get_mut(self.view_emb);
            for j in 0..z.f {
                for c in 0..ch {
                    gve[(j / run) * ch + c] += plane_sums[j * ch + c];
                }
            }
        }
        self.stem.backward(p, &mut g, z, &gh);
        g
    }

    /// Attention probabilities of the adapter on control block `block` at
    /// spatial site `s`, `(heads, F, F)`. `None` if that block has no adapter.
    pub fn adapter_attention(
        &self,
        block: usize,
        z: &Feat,
        t: &[f64],
        cond: &CondInputs,
        s: usize,
    ) -> Result<Option<Vec<f64>>, ModelError> {
        let Some(ad) = self.adapters.get(block).and_then(Option::as_ref) else {
            return Ok(None);
        };
        let (_, trace) = self.forward_trace(z, t, cond, ForwardOptions::FULL)?;
        Ok(Some(ad.attention_weights(&self.params, &trace.control_out[block], s, self.config.views)))
    }
}
