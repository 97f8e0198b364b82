use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Serializable description of one layer. Shapes are inferred when a
/// [`crate::Network`] is built, so specs only carry hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Same-padded, stride-1 convolution with an odd square kernel.
    Conv { out: usize, kernel: usize },
    Dense { out: usize },
    Relu,
    /// 2×2 max pooling, stride 2 (odd trailing rows/columns are dropped).
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    /// Inverted dropout; identity at inference.
    Dropout { rate: f32 },
    /// Per-channel spatial softmax followed by the expected (x, y) position,
    /// normalized to [0, 1] by the map width/height.
    SoftArgmax,
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: (usize, usize, usize),
    pub out_shape: (usize, usize, usize),
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// What backward needs from forward, per layer.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<f32>),
    Softmax(Vec<f32>),
}

impl Layer {
    pub fn build(spec: &LayerSpec, in_shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = in_shape;
        let (out_shape, wlen, blen) = match *spec {
            LayerSpec::Conv { out, kernel } => {
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(NnError::Usage(format!("conv kernel must be odd, got {kernel}")));
                }
                ((out, h, w), out * c * kernel * kernel, out)
            }
            LayerSpec::Dense { out } => {
                if h != 1 || w != 1 {
                    return Err(NnError::Shape(format!(
                        "dense layer expects a flat input, got {c}x{h}x{w}"
                    )));
                }
                ((out, 1, 1), out * c, out)
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => (in_shape, 0, 0),
            LayerSpec::MaxPool2 => {
                if h < 2 || w < 2 {
                    return Err(NnError::Shape(format!("cannot pool a {h}x{w} map")));
                }
                ((c, h / 2, w / 2), 0, 0)
            }
            LayerSpec::GlobalAvgPool => ((c, 1, 1), 0, 0),
            LayerSpec::Flatten => ((c * h * w, 1, 1), 0, 0),
            LayerSpec::SoftArgmax => ((2 * c, 1, 1), 0, 0),
        };
        Ok(Layer {
            spec: spec.clone(),
            in_shape,
            out_shape,
            weight: vec![0.0; wlen],
            bias: vec![0.0; blen],
        })
    }

    pub fn has_params(&self) -> bool {
        !self.weight.is_empty()
    }

    fn fan_in(&self) -> usize {
        match self.spec {
            LayerSpec::Conv { kernel, .. } => self.in_shape.0 * kernel * kernel,
            LayerSpec::Dense { .. } => self.in_shape.0,
            _ => 1,
        }
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        if !self.has_params() {
            return;
        }
        let std = (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in self.weight.iter_mut() {
            *w = normal.sample(rng) as f32;
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn forward<R: Rng>(&self, x: &Tensor, rng: Option<&mut R>) -> (Tensor, Aux) {
        debug_assert_eq!(x.shape(), self.in_shape);
        match self.spec {
            LayerSpec::Conv { out, kernel } => (conv_forward(x, &self.weight, &self.bias, out, kernel), Aux::None),
            LayerSpec::Dense { out } => {
                let n = x.c;
                let mut y = self.bias.clone();
                for (o, yo) in y.iter_mut().enumerate().take(out) {
                    let row = &self.weight[o * n..(o + 1) * n];
                    *yo += dot(row, &x.data);
                }
                (Tensor::vector(y), Aux::None)
            }
            LayerSpec::Relu => {
                let data = x.data.iter().map(|&v| v.max(0.0)).collect();
                (Tensor::from_vec(x.c, x.h, x.w, data), Aux::None)
            }
            LayerSpec::MaxPool2 => {
                let (c, h, w) = self.out_shape;
                let mut out = Tensor::zeros(c, h, w);
                let mut arg = vec![0u32; c * h * w];
                for ch in 0..c {
                    let plane = x.plane(ch);
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut best = f32::NEG_INFINITY;
                            let mut bi = 0usize;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = (2 * oy + dy) * x.w + 2 * ox + dx;
                                    if plane[i] > best {
                                        best = plane[i];
                                        bi = i;
                                    }
                                }
                            }
                            let o = (ch * h + oy) * w + ox;
                            out.data[o] = best;
                            arg[o] = (ch * x.h * x.w + bi) as u32;
                        }
                    }
                }
                (out, Aux::Argmax(arg))
            }
            LayerSpec::GlobalAvgPool => {
                let n = (x.h * x.w) as f32;
                let data = (0..x.c).map(|ch| x.plane(ch).iter().sum::<f32>() / n).collect();
                (Tensor::vector(data), Aux::None)
            }
            LayerSpec::Flatten => (Tensor::vector(x.data.clone()), Aux::None),
            LayerSpec::Dropout { rate } => match rng {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f32> = (0..x.len())
                        .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (Tensor::from_vec(x.c, x.h, x.w, data), Aux::Mask(mask))
                }
                _ => (x.clone(), Aux::None),
            },
            LayerSpec::SoftArgmax => {
                let n = x.h * x.w;
                let mut probs = vec![0.0f32; x.len()];
                let mut out = Vec::with_capacity(2 * x.c);
                for ch in 0..x.c {
                    let plane = x.plane(ch);
                    let p = &mut probs[ch * n..(ch + 1) * n];
                    let m = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0f32;
                    for (pi, &v) in p.iter_mut().zip(plane) {
                        *pi = (v - m).exp();
                        s += *pi;
                    }
                    let (mut ex, mut ey) = (0.0f32, 0.0f32);
                    for (i, pi) in p.iter_mut().enumerate() {
                        *pi /= s;
                        ex += *pi * grid_x(i % x.w, x.w);
                        ey += *pi * grid_x(i / x.w, x.h);
                    }
                    out.push(ex);
                    out.push(ey);
                }
                (Tensor::vector(out), Aux::Softmax(probs))
            }
        }
    }

    /// Returns the gradient w.r.t. the layer input and accumulates parameter
    /// gradients into `gw` / `gb`.
    pub fn backward(&self, x: &Tensor, y: &Tensor, aux: &Aux, gy: &Tensor, gw: &mut [f32], gb: &mut [f32]) -> Tensor {
        match self.spec {
            LayerSpec::Conv { out, kernel } => conv_backward(x, &self.weight, gy, out, kernel, gw, gb),
            LayerSpec::Dense { out } => {
                let n = x.c;
                let mut gx = vec![0.0f32; n];
                for o in 0..out {
                    let g = gy.data[o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let row = &self.weight[o * n..(o + 1) * n];
                    let grow = &mut gw[o * n..(o + 1) * n];
                    for i in 0..n {
                        grow[i] += g * x.data[i];
                        gx[i] += g * row[i];
                    }
                }
                Tensor::vector(gx)
            }
            LayerSpec::Relu => {
                let data = x.data.iter().zip(&gy.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                Tensor::from_vec(x.c, x.h, x.w, data)
            }
            LayerSpec::MaxPool2 => {
                let mut gx = Tensor::zeros(x.c, x.h, x.w);
                if let Aux::Argmax(arg) = aux {
                    for (o, &i) in arg.iter().enumerate() {
                        gx.data[i as usize] += gy.data[o];
                    }
                }
                gx
            }
            LayerSpec::GlobalAvgPool => {
                let n = x.h * x.w;
                let mut gx = Tensor::zeros(x.c, x.h, x.w);
                for ch in 0..x.c {
                    let g = gy.data[ch] / n as f32;
                    gx.plane_mut(ch).iter_mut().for_each(|v| *v = g);
                }
                gx
            }
            LayerSpec::Flatten => Tensor::from_vec(x.c, x.h, x.w, gy.data.clone()),
            LayerSpec::Dropout { .. } => match aux {
                Aux::Mask(mask) => {
                    let data = gy.data.iter().zip(mask).map(|(g, m)| g * m).collect();
                    Tensor::from_vec(x.c, x.h, x.w, data)
                }
                _ => gy.clone(),
            },
            LayerSpec::SoftArgmax => {
                let n = x.h * x.w;
                let mut gx = Tensor::zeros(x.c, x.h, x.w);
                if let Aux::Softmax(probs) = aux {
                    for ch in 0..x.c {
                        let (ox, oy) = (y.data[2 * ch], y.data[2 * ch + 1]);
                        let (gxo, gyo) = (gy.data[2 * ch], gy.data[2 * ch + 1]);
                        let p = &probs[ch * n..(ch + 1) * n];
                        let g = gx.plane_mut(ch);
                        for i in 0..n {
                            let px = grid_x(i % x.w, x.w);
                            let py = grid_x(i / x.w, x.h);
                            g[i] = p[i] * ((px - ox) * gxo + (py - oy) * gyo);
                        }
                    }
                }
                gx
            }
        }
    }
}

#[inline]
fn grid_x(i: usize, n: usize) -> f32 {
    (i as f32 + 0.5) / n as f32
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row range `[lo, hi)` of outputs whose shifted source row stays in bounds.
#[inline]
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Unfolds `x` into a `(cin*k*k) x (h*w)` row-major patch matrix with zero padding.
fn im2col(x: &Tensor, k: usize) -> Vec<f32> {
    let (cin, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0f32; cin * k * k * hw];
    for ci in 0..cin {
        let ip = x.plane(ci);
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let s0 = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                    row[y * w + x0..y * w + x1].copy_from_slice(&ip[s0 as usize..s0 as usize + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adds the patch-matrix gradient back onto the input layout.
fn col2im(cols: &[f32], shape: (usize, usize, usize), k: usize) -> Tensor {
    let (cin, h, w) = shape;
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut gx = Tensor::zeros(cin, h, w);
    for ci in 0..cin {
        let gp = gx.plane_mut(ci);
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let s0 = (((y as isize + dy) as usize * w) as isize + x0 as isize + dx) as usize;
                    for (g, c) in gp[s0..s0 + (x1 - x0)].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *g += c;
                    }
                }
            }
        }
    }
    gx
}

/// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`.
/// `ta`/`tb` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked by the assertion.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn conv_forward(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize, k: usize) -> Tensor {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(cout, h, w);
    for co in 0..cout {
        out.plane_mut(co).iter_mut().for_each(|v| *v = bias[co]);
    }
    let depth = cin * k * k;
    if k == 1 {
        gemm(cout, depth, hw, weight, false, &x.data, false, 1.0, &mut out.data);
    } else {
        gemm(cout, depth, hw, weight, false, &im2col(x, k), false, 1.0, &mut out.data);
    }
    out
}

fn conv_backward(x: &Tensor, weight: &[f32], gy: &Tensor, cout: usize, k: usize, gw: &mut [f32], gb: &mut [f32]) -> Tensor {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let depth = cin * k * k;
    for co in 0..cout {
        gb[co] += gy.plane(co).iter().sum::<f32>();
    }
    let cols_owned;
    let cols: &[f32] = if k == 1 {
        &x.data
    } else {
        cols_owned = im2col(x, k);
        &cols_owned
    };
    gemm(cout, hw, depth, &gy.data, false, cols, true, 1.0, gw);
    let mut gcols = vec![0.0f32; depth * hw];
    gemm(depth, cout, hw, weight, true, &gy.data, false, 0.0, &mut gcols);
    if k == 1 {
        Tensor::from_vec(cin, h, w, gcols)
    } else {
        col2im(&gcols, (cin, h, w), k)
    }
}
