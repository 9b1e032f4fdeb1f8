//! Layers with hand-written backward passes. `forward` takes parameter
//! values; `backward` takes the forward input and the output gradient,
//! accumulates parameter gradients and returns the input gradient.

use rand_xoshiro::Xoshiro256PlusPlus;

use super::feat::Feat;
use super::params::{Grads, Init, ParamId, ParamRole, ParamStore};

/// Valid output range `[lo, hi)` along an axis of length `n` for offset `d`
/// so that `i + d` stays in bounds.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `k×k` convolution with zero "same" padding, applied frame by frame.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        (cin, cout, k): (usize, usize, usize),
        gain: f64,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernel");
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::Scaled {
                fan_in: cin * k * k,
                gain,
            }
        };
        let weight = store.add(format!("{name}.weight"), vec![cout, cin, k, k], role, init, rng);
        let bias = store.add(format!("{name}.bias"), vec![cout], role, Init::Zeros, rng);
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (wt, b) = (p.value(self.weight), p.value(self.bias));
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let (h, w) = (x.h, x.w);
        let mut out = Feat::zeros(x.f, self.cout, h, w);
        for j in 0..x.f {
            for co in 0..self.cout {
                let o = out.plane_mut(j, co);
                o.fill(b[co]);
                for ci in 0..self.cin {
                    let inp = x.plane(j, ci);
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(w, dx);
                            let wv = wt[((co * self.cin + ci) * k + ky) * k + kx];
                            for y in y0..y1 {
                                let src = ((y as isize + dy) as usize) * w;
                                let orow = &mut o[y * w + x0..y * w + x1];
                                let irow = &inp[(src as isize + x0 as isize + dx) as usize..];
                                for (a, &v) in orow.iter_mut().zip(irow) {
                                    *a += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &Feat, gy: &Feat) -> Feat {
        let wt = p.value(self.weight);
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let (h, w) = (x.h, x.w);
        let mut gx = x.zeros_like();
        {
            let gb = g.get_mut(self.bias);
            for j in 0..x.f {
                for (co, gbc) in gb.iter_mut().enumerate() {
                    *gbc += gy.plane(j, co).iter().sum::<f64>();
                }
            }
        }
        let mut gw = vec![0.0; wt.len()];
        for j in 0..x.f {
            for co in 0..self.cout {
                let go = gy.plane(j, co);
                for ci in 0..self.cin {
                    let inp = x.plane(j, ci);
                    let gin = gx.plane_mut(j, ci);
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(w, dx);
                            let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let src = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                                let grow = &go[y * w + x0..y * w + x1];
                                let irow = &inp[src as usize..src as usize + (x1 - x0)];
                                for (&gv, &v) in grow.iter().zip(irow) {
                                    acc += gv * v;
                                }
                                let girow = &mut gin[src as usize..src as usize + (x1 - x0)];
                                for (a, &gv) in girow.iter_mut().zip(grow) {
                                    *a += wv * gv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        g.get_mut(self.weight).iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
        gx
    }
}

/// Per-channel `k×k` convolution (no channel mixing), "same" padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c: usize,
    pub k: usize,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParamStore, name: &str, role: ParamRole, c: usize, k: usize, rng: &mut Xoshiro256PlusPlus) -> Self {
        assert!(k % 2 == 1, "odd kernel");
        let weight = store.add(
            format!("{name}.weight"),
            vec![c, k, k],
            role,
            Init::Scaled { fan_in: k * k, gain: 1.0 },
            rng,
        );
        let bias = store.add(format!("{name}.bias"), vec![c], role, Init::Zeros, rng);
        Self { weight, bias, c, k }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        assert_eq!(x.c, self.c, "depthwise channels");
        let (wt, b) = (p.value(self.weight), p.value(self.bias));
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let (h, w) = (x.h, x.w);
        let mut out = x.zeros_like();
        for j in 0..x.f {
            for c in 0..self.c {
                let inp = x.plane(j, c);
                let o = out.plane_mut(j, c);
                o.fill(b[c]);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = wt[(c * k + ky) * k + kx];
                        for y in y0..y1 {
                            let src = (((y as isize + dy) as usize * w) as isize + x0 as isize + dx) as usize;
                            for (a, &v) in o[y * w + x0..y * w + x1].iter_mut().zip(&inp[src..]) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &Feat, gy: &Feat) -> Feat {
        let wt = p.value(self.weight);
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let (h, w) = (x.h, x.w);
        let mut gx = x.zeros_like();
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; self.c];
        for j in 0..x.f {
            for c in 0..self.c {
                let inp = x.plane(j, c);
                let go = gy.plane(j, c);
                gb[c] += go.iter().sum::<f64>();
                let gin = gx.plane_mut(j, c);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let widx = (c * k + ky) * k + kx;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src = (((y as isize + dy) as usize * w) as isize + x0 as isize + dx) as usize;
                            let n = x1 - x0;
                            let grow = &go[y * w + x0..y * w + x1];
                            for (&gv, &v) in grow.iter().zip(&inp[src..src + n]) {
                                acc += gv * v;
                            }
                            for (a, &gv) in gin[src..src + n].iter_mut().zip(grow) {
                                *a += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        add_into(g.get_mut(self.weight), &gw);
        add_into(g.get_mut(self.bias), &gb);
        gx
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Kernel-3 convolution along time, per spatial site, with zero padding at
/// the ends of each view's frame run. Frames are laid out view-major.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c: usize,
}

const TK: usize = 3;

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, role: ParamRole, c: usize, rng: &mut Xoshiro256PlusPlus) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![c, c, TK],
            role,
            Init::Scaled { fan_in: c * TK, gain: 1.0 },
            rng,
        );
        let bias = store.add(format!("{name}.bias"), vec![c], role, Init::Zeros, rng);
        Self { weight, bias, c }
    }

    fn neighbors(f: usize, views: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
        assert!(views > 0 && f % views == 0, "{f} frames do not split into {views} views");
        let run = f / views;
        let (v, t) = (j / run, j % run);
        (0..TK).filter_map(move |tap| {
            let t2 = t as isize + tap as isize - 1;
            (0..run as isize).contains(&t2).then(|| (tap, v * run + t2 as usize))
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat, views: usize) -> Feat {
        assert_eq!(x.c, self.c, "temporal conv channels");
        let (wt, b) = (p.value(self.weight), p.value(self.bias));
        let c = self.c;
        let mut out = x.zeros_like();
        for j in 0..x.f {
            for co in 0..c {
                out.plane_mut(j, co).fill(b[co]);
            }
            for (tap, src) in Self::neighbors(x.f, views, j) {
                for co in 0..c {
                    for ci in 0..c {
                        let wv = wt[(co * c + ci) * TK + tap];
                        let inp = x.plane(src, ci);
                        for (a, &v) in out.plane_mut(j, co).iter_mut().zip(inp) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &Feat, gy: &Feat, views: usize) -> Feat {
        let wt = p.value(self.weight);
        let c = self.c;
        let mut gx = x.zeros_like();
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; c];
        for j in 0..x.f {
            for (co, gbc) in gb.iter_mut().enumerate() {
                *gbc += gy.plane(j, co).iter().sum::<f64>();
            }
            for (tap, src) in Self::neighbors(x.f, views, j) {
                for co in 0..c {
                    let go = gy.plane(j, co);
                    for ci in 0..c {
                        let widx = (co * c + ci) * TK + tap;
                        let inp = x.plane(src, ci);
                        gw[widx] += go.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
                        let wv = wt[widx];
                        for (a, &gv) in gx.plane_mut(src, ci).iter_mut().zip(go) {
                            *a += wv * gv;
                        }
                    }
                }
            }
        }
        add_into(g.get_mut(self.weight), &gw);
        add_into(g.get_mut(self.bias), &gb);
        gx
    }
}

/// Multi-head self-attention across all frames at each spatial site, with
/// a residual connection: `y = x + W_o · attn(x)`.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub c: usize,
    pub heads: usize,
}

/// Per-site activations kept for the backward pass.
struct SiteCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `(heads, T, T)` attention probabilities.
    attn: Vec<f64>,
    o: Vec<f64>,
}

/// `out[t][r] = Σ_c m[r][c] · x[t][c]` for row-major `(rows, cols)` `m`.
fn matmul_rows(x: &[f64], m: &[f64], t: usize, cols: usize, rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * rows];
    for i in 0..t {
        let xi = &x[i * cols..(i + 1) * cols];
        for r in 0..rows {
            out[i * rows + r] = m[r * cols..(r + 1) * cols].iter().zip(xi).map(|(a, b)| a * b).sum();
        }
    }
    out
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, name: &str, role: ParamRole, c: usize, heads: usize, rng: &mut Xoshiro256PlusPlus) -> Self {
        assert!(heads > 0 && c % heads == 0, "{c} channels do not split into {heads} heads");
        let init = Init::Scaled { fan_in: c, gain: 1.0 };
        let mut mat = |suffix: &str| store.add(format!("{name}.{suffix}"), vec![c, c], role, init, rng);
        let (wq, wk, wv, wo) = (mat("wq"), mat("wk"), mat("wv"), mat("wo"));
        let bo = store.add(format!("{name}.bo"), vec![c], role, Init::Zeros, rng);
        Self {
            wq,
            wk,
            wv,
            wo,
            bo,
            c,
            heads,
        }
    }

    fn gather(x: &Feat, s: usize) -> Vec<f64> {
        let a = x.area();
        let mut out = Vec::with_capacity(x.f * x.c);
        for j in 0..x.f {
            let frame = x.frame(j);
            out.extend((0..x.c).map(|ch| frame[ch * a + s]));
        }
        out
    }

    fn scatter(dst: &mut Feat, s: usize, vals: &[f64]) {
        let (a, c) = (dst.area(), dst.c);
        for j in 0..dst.f {
            let frame = dst.frame_mut(j);
            for ch in 0..c {
                frame[ch * a + s] = vals[j * c + ch];
            }
        }
    }

    fn site_forward(&self, p: &ParamStore, xs: Vec<f64>, t: usize) -> SiteCache {
        let c = self.c;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let q = matmul_rows(&xs, p.value(self.wq), t, c, c);
        let k = matmul_rows(&xs, p.value(self.wk), t, c, c);
        let v = matmul_rows(&xs, p.value(self.wv), t, c, c);
        let mut attn = vec![0.0; self.heads * t * t];
        let mut o = vec![0.0; t * c];
        for hd in 0..self.heads {
            let off = hd * d;
            for i in 0..t {
                let row = &mut attn[(hd * t + i) * t..(hd * t + i + 1) * t];
                for (jj, r) in row.iter_mut().enumerate() {
                    *r = scale
                        * (0..d)
                            .map(|e| q[i * c + off + e] * k[jj * c + off + e])
                            .sum::<f64>();
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
                for e in 0..d {
                    o[i * c + off + e] = row.iter().enumerate().map(|(jj, a)| a * v[jj * c + off + e]).sum();
                }
            }
        }
        SiteCache { x: xs, q, k, v, attn, o }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        assert_eq!(x.c, self.c, "attention channels");
        let (t, c) = (x.f, self.c);
        let (wo, bo) = (p.value(self.wo), p.value(self.bo));
        let mut out = x.zeros_like();
        for s in 0..x.area() {
            let cache = self.site_forward(p, Self::gather(x, s), t);
            let proj = matmul_rows(&cache.o, wo, t, c, c);
            let y: Vec<f64> = (0..t * c).map(|i| cache.x[i] + proj[i] + bo[i % c]).collect();
            Self::scatter(&mut out, s, &y);
        }
        out
    }

    /// Attention probabilities at spatial site `s`, `(heads, T, T)`.
    pub fn weights_at(&self, p: &ParamStore, x: &Feat, s: usize) -> Vec<f64> {
        self.site_forward(p, Self::gather(x, s), x.f).attn
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &Feat, gy: &Feat) -> Feat {
        let (t, c) = (x.f, self.c);
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (wq, wk, wv, wo) = (p.value(self.wq), p.value(self.wk), p.value(self.wv), p.value(self.wo));
        let mut gwq = vec![0.0; c * c];
        let mut gwk = vec![0.0; c * c];
        let mut gwv = vec![0.0; c * c];
        let mut gwo = vec![0.0; c * c];
        let mut gbo = vec![0.0; c];
        let mut gx = x.zeros_like();
        for s in 0..x.area() {
            let cache = self.site_forward(p, Self::gather(x, s), t);
            let gys = Self::gather(gy, s);
            // residual path
            let mut gxs = gys.clone();
            // output projection
            let mut go = vec![0.0; t * c];
            for i in 0..t {
                for r in 0..c {
                    let gv = gys[i * c + r];
                    gbo[r] += gv;
                    for cc in 0..c {
                        gwo[r * c + cc] += gv * cache.o[i * c + cc];
                        go[i * c + cc] += gv * wo[r * c + cc];
                    }
                }
            }
            let mut gq = vec![0.0; t * c];
            let mut gk = vec![0.0; t * c];
            let mut gvv = vec![0.0; t * c];
            for hd in 0..self.heads {
                let off = hd * d;
                for i in 0..t {
                    let a = &cache.attn[(hd * t + i) * t..(hd * t + i + 1) * t];
                    // d loss / d attn[i][j]
                    let ga: Vec<f64> = (0..t)
                        .map(|jj| (0..d).map(|e| go[i * c + off + e] * cache.v[jj * c + off + e]).sum())
                        .collect();
                    for jj in 0..t {
                        for e in 0..d {
                            gvv[jj * c + off + e] += a[jj] * go[i * c + off + e];
                        }
                    }
                    let dot: f64 = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
                    for jj in 0..t {
                        let gs = a[jj] * (ga[jj] - dot) * scale;
                        for e in 0..d {
                            gq[i * c + off + e] += gs * cache.k[jj * c + off + e];
                            gk[jj * c + off + e] += gs * cache.q[i * c + off + e];
                        }
                    }
                }
            }
            for (gm, m, gwm) in [(&gq, wq, &mut gwq), (&gk, wk, &mut gwk), (&gvv, wv, &mut gwv)] {
                for i in 0..t {
                    for r in 0..c {
                        let gv = gm[i * c + r];
                        for cc in 0..c {
                            gwm[r * c + cc] += gv * cache.x[i * c + cc];
                            gxs[i * c + cc] += gv * m[r * c + cc];
                        }
                    }
                }
            }
            Self::scatter(&mut gx, s, &gxs);
        }
        add_into(g.get_mut(self.wq), &gwq);
        add_into(g.get_mut(self.wk), &gwk);
        add_into(g.get_mut(self.wv), &gwv);
        add_into(g.get_mut(self.wo), &gwo);
        add_into(g.get_mut(self.bo), &gbo);
        gx
    }
}

/// Two 3×3 convolutions on a residual branch: `y = x + conv2(silu(conv1(silu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// Forward activations of a [`ResBlock`].
#[derive(Clone, Debug)]
pub struct ResCache {
    x: Feat,
    a: Feat,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, role: ParamRole, c: usize, rng: &mut Xoshiro256PlusPlus) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), role, (c, c, 3), 1.0, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), role, (c, c, 3), 0.5, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> (Feat, ResCache) {
        let a = self.conv1.forward(p, &super::feat::silu(x));
        let r = self.conv2.forward(p, &super::feat::silu(&a));
        (x.add(&r), ResCache { x: x.clone(), a })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &ResCache, gy: &Feat) -> Feat {
        let gu2 = self.conv2.backward(p, g, &super::feat::silu(&cache.a), gy);
        let ga = super::feat::silu_backward(&cache.a, &gu2);
        let gu1 = self.conv1.backward(p, g, &super::feat::silu(&cache.x), &ga);
        let mut gx = super::feat::silu_backward(&cache.x, &gu1);
        gx.add_assign(gy);
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn random_feat(r: &mut Xoshiro256PlusPlus, shape: [usize; 4]) -> Feat {
        let n = shape.iter().product();
        Feat::from_vec(shape[0], shape[1], shape[2], shape[3], (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// Checks input and parameter gradients of `fwd` against central
    /// differences of the scalar `Σ probe ⊙ fwd(x)`.
    fn check_layer(
        store: &ParamStore,
        x: &Feat,
        fwd: &dyn Fn(&ParamStore, &Feat) -> Feat,
        bwd: &dyn Fn(&ParamStore, &mut Grads, &Feat, &Feat) -> Feat,
    ) {
        let mut r = rng(99);
        let y = fwd(store, x);
        let probe = random_feat(&mut r, y.shape());
        let objective = |s: &ParamStore, x: &Feat| -> f64 { fwd(s, x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
        let mut g = store.zero_grads();
        let gx = bwd(store, &mut g, x, &probe);
        let err = max_relative_error(&x.data, &gx.data, 1e-5, 1e-7, |v| {
            objective(store, &Feat::from_vec(x.f, x.c, x.h, x.w, v.to_vec()))
        });
        assert!(err < 1e-6, "input gradient error {err}");
        for id in store.ids() {
            let base = store.value(id).to_vec();
            let analytic = g.get(id).to_vec();
            let mut s2 = store.clone();
            let err = max_relative_error(&base, &analytic, 1e-5, 1e-7, |v| {
                s2.value_mut(id).copy_from_slice(v);
                objective(&s2, x)
            });
            assert!(err < 1e-6, "{} gradient error {err}", store.get(id).name);
        }
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for p in store.params_mut() {
            p.value.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", ParamRole::Base, (2, 3, 3), 1.0, &mut r);
        randomize(&mut store, 2);
        let x = random_feat(&mut r, [2, 2, 4, 5]);
        let y = conv.forward(&store, &x);
        let (wt, b) = (store.value(conv.weight), store.value(conv.bias));
        for j in 0..2 {
            for co in 0..3 {
                for yy in 0..4i64 {
                    for xx in 0..5i64 {
                        let mut acc = b[co];
                        for ci in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                        acc += wt[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                            * x.plane(j, ci)[(sy * 5 + sx) as usize];
                                    }
                                }
                            }
                        }
                        assert!((y.plane(j, co)[(yy * 5 + xx) as usize] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, shape) in [(3, [2, 3, 4, 5]), (1, [1, 4, 3, 3]), (3, [1, 2, 1, 1])] {
            let mut r = rng(3);
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", ParamRole::Base, (shape[1], 2, k), 1.0, &mut r);
            randomize(&mut store, 4);
            let x = random_feat(&mut r, shape);
            check_layer(&store, &x, &|p, x| conv.forward(p, x), &|p, g, x, gy| conv.backward(p, g, x, gy));
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let dw = DepthwiseConv::new(&mut store, "d", ParamRole::Adapter, 3, 3, &mut r);
        randomize(&mut store, 6);
        let x = random_feat(&mut r, [2, 3, 4, 3]);
        check_layer(&store, &x, &|p, x| dw.forward(p, x), &|p, g, x, gy| dw.backward(p, g, x, gy));
    }

    #[test]
    fn temporal_conv_gradients_and_view_isolation() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let tc = TemporalConv::new(&mut store, "t", ParamRole::Adapter, 2, &mut r);
        randomize(&mut store, 8);
        let x = random_feat(&mut r, [6, 2, 2, 3]);
        check_layer(&store, &x, &|p, x| tc.forward(p, x, 2), &|p, g, x, gy| tc.backward(p, g, x, gy, 2));
        // frames of the second view do not leak into the first
        let y = tc.forward(&store, &x, 2);
        let mut x2 = x.clone();
        x2.frame_mut(3).iter_mut().for_each(|v| *v += 1.0);
        let y2 = tc.forward(&store, &x2, 2);
        assert_eq!(y.frame(2), y2.frame(2));
        assert_ne!(y.frame(4), y2.frame(4));
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let at = TemporalAttention::new(&mut store, "a", ParamRole::Adapter, 4, 2, &mut r);
        randomize(&mut store, 10);
        let x = random_feat(&mut r, [3, 4, 2, 2]);
        check_layer(&store, &x, &|p, x| at.forward(p, x), &|p, g, x, gy| at.backward(p, g, x, gy));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let at = TemporalAttention::new(&mut store, "a", ParamRole::Adapter, 4, 2, &mut r);
        let x = random_feat(&mut r, [5, 4, 2, 3]);
        for s in 0..6 {
            let w = at.weights_at(&store, &x, s);
            for row in w.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
        // one frame: every token attends only to itself
        let single = random_feat(&mut r, [1, 4, 2, 3]);
        assert!(at.weights_at(&store, &single, 0).iter().all(|w| *w == 1.0));
        assert_eq!(at.forward(&store, &single).shape(), single.shape());
    }

    #[test]
    fn res_block_gradients() {
        let mut r = rng(12);
        let mut store = ParamStore::new();
        let rb = ResBlock::new(&mut store, "r", ParamRole::Base, 2, &mut r);
        randomize(&mut store, 13);
        let x = random_feat(&mut r, [2, 2, 3, 4]);
        check_layer(&store, &x, &|p, x| rb.forward(p, x).0, &|p, g, x, gy| {
            let (_, cache) = rb.forward(p, x);
            rb.backward(p, g, &cache, gy)
        });
    }
}
