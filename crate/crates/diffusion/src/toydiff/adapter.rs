//! Shape-preserving consistency adapter applied to control-branch features:
//! depthwise-separable spatial convolution, temporal convolution, temporal
//! self-attention, then a zero-initialized projection added back onto the
//! input.

use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::feat::{silu, silu_backward, Feat};
use super::layers::{Conv2d, DepthwiseConv, TemporalAttention, TemporalConv};
use super::params::{Grads, ParamRole, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Indices of the control blocks whose outputs pass through an adapter.
    pub blocks: Vec<usize>,
    pub heads: usize,
    pub spatial_kernel: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            blocks: vec![0, 1],
            heads: 2,
            spatial_kernel: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    depthwise: DepthwiseConv,
    pointwise: Conv2d,
    temporal: TemporalConv,
    attention: TemporalAttention,
    out: Conv2d,
}

/// Forward activations of an [`Adapter`].
#[derive(Clone, Debug)]
pub struct AdapterCache {
    c: Feat,
    dw: Feat,
    pw: Feat,
    tc: Feat,
    attn: Feat,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &AdapterConfig, rng: &mut Xoshiro256PlusPlus) -> Self {
        let role = ParamRole::Adapter;
        Self {
            depthwise: DepthwiseConv::new(store, &format!("{name}.spatial.depthwise"), role, c, cfg.spatial_kernel, rng),
            pointwise: Conv2d::new(store, &format!("{name}.spatial.pointwise"), role, (c, c, 1), 1.0, rng),
            temporal: TemporalConv::new(store, &format!("{name}.temporal"), role, c, rng),
            attention: TemporalAttention::new(store, &format!("{name}.attention"), role, c, cfg.heads, rng),
            out: Conv2d::new(store, &format!("{name}.out"), role, (c, c, 1), 0.0, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, c: &Feat, views: usize) -> (Feat, AdapterCache) {
        let dw = self.depthwise.forward(p, c);
        let pw = self.pointwise.forward(p, &dw);
        let tc = self.temporal.forward(p, &silu(&pw), views);
        let attn = self.attention.forward(p, &silu(&tc));
        let out = c.add(&self.out.forward(p, &attn));
        let cache = AdapterCache {
            c: c.clone(),
            dw,
            pw,
            tc,
            attn,
        };
        (out, cache)
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &AdapterCache, gy: &Feat, views: usize) -> Feat {
        let g_attn = self.out.backward(p, g, &cache.attn, gy);
        let g_tc_act = self.attention.backward(p, g, &silu(&cache.tc), &g_attn);
        let g_tc = silu_backward(&cache.tc, &g_tc_act);
        let g_pw_act = self.temporal.backward(p, g, &silu(&cache.pw), &g_tc, views);
        let g_pw = silu_backward(&cache.pw, &g_pw_act);
        let g_dw = self.pointwise.backward(p, g, &cache.dw, &g_pw);
        let mut gc = self.depthwise.backward(p, g, &cache.c, &g_dw);
        gc.add_assign(gy);
        gc
    }

    /// Attention probabilities at spatial site `s` for input `c`.
    pub fn attention_weights(&self, p: &ParamStore, c: &Feat, s: usize, views: usize) -> Vec<f64> {
        let pw = self.pointwise.forward(p, &self.depthwise.forward(p, c));
        let tc = self.temporal.forward(p, &silu(&pw), views);
        self.attention.weights_at(p, &silu(&tc), s)
    }
}
