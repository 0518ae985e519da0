//! Minimal differentiable building blocks shared by the denoiser and the
//! toy detector.
//!
//! Every model keeps its weights in one flat `Vec<f64>`; layers only record
//! offsets into it. Backward passes accumulate into an equally sized flat
//! gradient buffer (or skip parameter gradients entirely when only the input
//! gradient is wanted), which keeps checkpointing, Adam and per-worker
//! gradient reduction trivial.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::ImageGrid;

/// Allocates parameter ranges and initializes them.
pub struct ParamBuilder<'a, R: Rng> {
    params: Vec<f64>,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            params: Vec::new(),
            rng,
        }
    }

    pub fn normal(&mut self, n: usize, std: f64) -> usize {
        let off = self.params.len();
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(self.rng);
            self.params.push(z * std);
        }
        off
    }

    pub fn zeros(&mut self, n: usize) -> usize {
        let off = self.params.len();
        self.params.resize(off + n, 0.0);
        off
    }

    pub fn finish(self) -> Vec<f64> {
        self.params
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &ImageGrid) -> ImageGrid {
    x.map(|v| v * sigmoid(v))
}

/// `dy * silu'(x)`.
pub fn silu_backward(x: &ImageGrid, dy: &ImageGrid) -> ImageGrid {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    }
    out
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Square convolution with `k` in {1, 3}, zero padding `k / 2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    w: usize,
    b: usize,
}

/// Saved state of a convolution forward pass.
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_gain(pb, cin, cout, k, stride, 1.0)
    }

    /// He-style init scaled by `gain`; `gain = 0` gives a zero-initialized layer.
    pub fn with_gain<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (cin * k * k) as f64;
        let w = if gain == 0.0 {
            pb.zeros(cout * cin * k * k)
        } else {
            pb.normal(cout * cin * k * k, gain * (2.0 / fan_in).sqrt())
        };
        let b = pb.zeros(cout);
        Self {
            cin,
            cout,
            k,
            stride,
            w,
            b,
        }
    }

    fn ksize(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &ImageGrid, ho: usize, wo: usize) -> Vec<f64> {
        let (c, h, w) = x.shape();
        if self.k == 1 && self.stride == 1 {
            return x.data().to_vec();
        }
        let pad = (self.k / 2) as isize;
        let n = ho * wo;
        let mut cols = vec![0.0; self.ksize() * n];
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], in_shape: (usize, usize, usize), ho: usize, wo: usize) -> ImageGrid {
        let (c, h, w) = in_shape;
        if self.k == 1 && self.stride == 1 {
            return ImageGrid::from_vec(c, h, w, dcols.to_vec()).expect("shape");
        }
        let pad = (self.k / 2) as isize;
        let n = ho * wo;
        let mut dx = ImageGrid::zeros(c, h, w);
        let dxd = dx.data_mut();
        for ci in 0..c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &dcols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dxd[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &ImageGrid) -> (ImageGrid, ConvCache) {
        debug_assert_eq!(x.channels(), self.cin);
        let (ho, wo) = self.out_hw(x.height(), x.width());
        let n = ho * wo;
        let kk = self.ksize();
        let cols = self.im2col(x, ho, wo);
        let mut y = vec![0.0; self.cout * n];
        for (co, row) in y.chunks_mut(n).enumerate() {
            row.fill(params[self.b + co]);
        }
        // y (cout x n) += W (cout x kk) * cols (kk x n)
        unsafe {
            matrixmultiply::dgemm(
                self.cout,
                kk,
                n,
                1.0,
                params[self.w..].as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                y.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        (
            ImageGrid::from_vec(self.cout, ho, wo, y).expect("shape"),
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient when `need_dx`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &ImageGrid,
        grads: Option<&mut [f64]>,
        need_dx: bool,
    ) -> Option<ImageGrid> {
        let (ho, wo) = cache.out_hw;
        let n = ho * wo;
        let kk = self.ksize();
        let dyd = dy.data();
        if let Some(g) = grads {
            // dW (cout x kk) += dy (cout x n) * cols^T (n x kk)
            unsafe {
                matrixmultiply::dgemm(
                    self.cout,
                    n,
                    kk,
                    1.0,
                    dyd.as_ptr(),
                    n as isize,
                    1,
                    cache.cols.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    g[self.w..].as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            for co in 0..self.cout {
                g[self.b + co] += dyd[co * n..(co + 1) * n].iter().sum::<f64>();
            }
        }
        if !need_dx {
            return None;
        }
        // dcols (kk x n) = W^T (kk x cout) * dy (cout x n)
        let mut dcols = vec![0.0; kk * n];
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.cout,
                n,
                1.0,
                params[self.w..].as_ptr(),
                1,
                kk as isize,
                dyd.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Some(self.col2im(&dcols, cache.in_shape, ho, wo))
    }
}

/// Fully connected layer on plain vectors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, nin: usize, nout: usize) -> Self {
        let w = pb.normal(nin * nout, (1.0 / nin as f64).sqrt());
        let b = pb.zeros(nout);
        Self { nin, nout, w, b }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.nout)
            .map(|o| {
                let row = &params[self.w + o * self.nin..self.w + (o + 1) * self.nin];
                params[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.nin];
        for o in 0..self.nout {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            grads[self.b + o] += g;
            let base = self.w + o * self.nin;
            for i in 0..self.nin {
                grads[base + i] += g * x[i];
                dx[i] += g * params[base + i];
            }
        }
        dx
    }
}

pub fn avg_pool2(x: &ImageGrid) -> ImageGrid {
    let (c, h, w) = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    ImageGrid::from_fn(c, ho, wo, |ci, y, xx| {
        0.25 * (x.get(ci, 2 * y, 2 * xx)
            + x.get(ci, 2 * y, 2 * xx + 1)
            + x.get(ci, 2 * y + 1, 2 * xx)
            + x.get(ci, 2 * y + 1, 2 * xx + 1))
    })
}

pub fn avg_pool2_backward(dy: &ImageGrid) -> ImageGrid {
    let (c, h, w) = dy.shape();
    ImageGrid::from_fn(c, h * 2, w * 2, |ci, y, x| 0.25 * dy.get(ci, y / 2, x / 2))
}

pub fn upsample2(x: &ImageGrid) -> ImageGrid {
    let (c, h, w) = x.shape();
    ImageGrid::from_fn(c, h * 2, w * 2, |ci, y, xx| x.get(ci, y / 2, xx / 2))
}

pub fn upsample2_backward(dy: &ImageGrid) -> ImageGrid {
    let (c, h, w) = dy.shape();
    ImageGrid::from_fn(c, h / 2, w / 2, |ci, y, x| {
        dy.get(ci, 2 * y, 2 * x)
            + dy.get(ci, 2 * y, 2 * x + 1)
            + dy.get(ci, 2 * y + 1, 2 * x)
            + dy.get(ci, 2 * y + 1, 2 * x + 1)
    })
}

/// Per-channel spatial mean.
pub fn global_avg_pool(x: &ImageGrid) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels())
        .map(|c| x.plane(c).iter().sum::<f64>() / n)
        .collect()
}

/// Sinusoidal embedding of a scalar timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
