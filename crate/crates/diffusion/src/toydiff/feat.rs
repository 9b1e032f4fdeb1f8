use crate::numerics::Tensor;

/// Activations laid out as `(frames, channels, height, width)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat {
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(f: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            f,
            c,
            h,
            w,
            data: vec![0.0; f * c * h * w],
        }
    }

    pub fn from_vec(f: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), f * c * h * w, "feature buffer size");
        Self { f, c, h, w, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.f, self.c, self.h, self.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.f, self.c, self.h, self.w]
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn plane(&self, frame: usize, ch: usize) -> &[f64] {
        let a = self.area();
        let start = (frame * self.c + ch) * a;
        &self.data[start..start + a]
    }

    #[inline]
    pub fn plane_mut(&mut self, frame: usize, ch: usize) -> &mut [f64] {
        let a = self.area();
        let start = (frame * self.c + ch) * a;
        &mut self.data[start..start + a]
    }

    /// All channels of one frame.
    pub fn frame(&self, frame: usize) -> &[f64] {
        let n = self.c * self.area();
        &self.data[frame * n..(frame + 1) * n]
    }

    pub fn frame_mut(&mut self, frame: usize) -> &mut [f64] {
        let n = self.c * self.area();
        &mut self.data[frame * n..(frame + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Feat) {
        assert_eq!(self.shape(), other.shape(), "feature shapes");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn add(&self, other: &Feat) -> Feat {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    /// Channel concatenation of frame-aligned features.
    pub fn concat_channels(parts: &[&Feat]) -> Feat {
        let first = parts.first().expect("at least one part");
        let (f, h, w) = (first.f, first.h, first.w);
        assert!(parts.iter().all(|p| p.f == f && p.h == h && p.w == w), "concat shapes");
        let c = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(f * c * h * w);
        for j in 0..f {
            for p in parts {
                data.extend_from_slice(p.frame(j));
            }
        }
        Feat::from_vec(f, c, h, w, data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Feat> {
        assert_eq!(sizes.iter().sum::<usize>(), self.c, "split sizes");
        let a = self.area();
        let mut out: Vec<Feat> = sizes.iter().map(|&c| Feat::zeros(self.f, c, self.h, self.w)).collect();
        for j in 0..self.f {
            let mut offset = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                let src = &self.frame(j)[offset * a..(offset + c) * a];
                part.frame_mut(j).copy_from_slice(src);
                offset += c;
            }
        }
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("finite features")
    }

    pub fn from_tensor(t: &Tensor) -> Option<Self> {
        match *t.shape() {
            [f, c, h, w] => Some(Self::from_vec(f, c, h, w, t.data().to_vec())),
            _ => None,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Feat) -> Feat {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v *= sigmoid(*v));
    out
}

/// Gradient through SiLU given the pre-activation `x`.
pub fn silu_backward(x: &Feat, gy: &Feat) -> Feat {
    let mut out = gy.clone();
    for (g, &v) in out.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    }
    out
}
