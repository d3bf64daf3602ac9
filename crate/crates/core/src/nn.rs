//! Network building blocks with hand-written reverse passes.
//!
//! Every layer works on NCHW [`Tensor`]s. Forward passes that need
//! intermediate values for the backward pass return a small tape; backward
//! passes return the input gradient and accumulate parameter gradients into a
//! zeroed copy of the layer (`zeros_like`), so a gradient has exactly the
//! shape and naming of the parameters it belongs to.

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::par;
use crate::tensor::Tensor;

/// Callback receiving a parameter's name, shape and values.
pub type ParamVisitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;

/// Visits named parameter arrays in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor);
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, v| v.fill(0.0));
        z
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Loads a flat vector produced by [`Params::flatten`]. Returns the
    /// number of values consumed.
    fn unflatten(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        self.visit_mut("", &mut |_, v| {
            let n = v.len();
            v.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
        pos
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Horizontal wrap-around, zero padding vertically.
    Circular,
    Zero,
}

/// Stride-1 "same" convolution (cross-correlation) with odd kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub padding: Padding,
    /// `[out][in][kh][kw]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `dst[x] = src[x + dx]` with wrap-around or zero fill.
fn shift_row(src: &[f64], dst: &mut [f64], dx: isize, padding: Padding) {
    let w = src.len() as isize;
    match padding {
        Padding::Circular => {
            let s = dx.rem_euclid(w) as usize;
            let w = w as usize;
            dst[..w - s].copy_from_slice(&src[s..]);
            dst[w - s..].copy_from_slice(&src[..s]);
        }
        Padding::Zero => {
            if dx.abs() >= w {
                dst.fill(0.0);
            } else if dx >= 0 {
                let d = dx as usize;
                let n = src.len() - d;
                dst[..n].copy_from_slice(&src[d..]);
                dst[n..].fill(0.0);
            } else {
                let d = (-dx) as usize;
                let n = src.len() - d;
                dst[d..].copy_from_slice(&src[..n]);
                dst[..d].fill(0.0);
            }
        }
    }
}

/// Adjoint of [`shift_row`]: `src[x + dx] += dst[x]`.
fn unshift_row_add(dst: &[f64], src: &mut [f64], dx: isize, padding: Padding) {
    let w = src.len() as isize;
    let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
    match padding {
        Padding::Circular => {
            let s = dx.rem_euclid(w) as usize;
            let w = w as usize;
            add(&mut src[s..], &dst[..w - s]);
            add(&mut src[..s], &dst[w - s..]);
        }
        Padding::Zero => {
            if dx.abs() >= w {
            } else if dx >= 0 {
                let d = dx as usize;
                let n = src.len() - d;
                add(&mut src[d..], &dst[..n]);
            } else {
                let d = (-dx) as usize;
                let n = src.len() - d;
                add(&mut src[..n], &dst[d..]);
            }
        }
    }
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            kernel.0 % 2 == 1 && kernel.1 % 2 == 1,
            "kernel sizes must be odd"
        );
        let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: (0..out_channels * in_channels * kernel.0 * kernel.1)
                .map(|_| dist.sample(rng))
                .collect(),
            bias: vec![0.0; out_channels],
        }
    }

    /// Builds a layer from explicit weights (`[out][in][kh][kw]`).
    pub fn from_weights(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: Padding,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        assert_eq!(
            weight.len(),
            out_channels * in_channels * kernel.0 * kernel.1
        );
        assert_eq!(bias.len(), out_channels);
        assert!(
            kernel.0 % 2 == 1 && kernel.1 % 2 == 1,
            "kernel sizes must be odd"
        );
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight,
            bias,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let hw = h * w;
        let mut cols = vec![0.0; self.patch_len() * hw];
        for c in 0..self.in_channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let row = (c * kh + ky) * kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        shift_row(
                            &plane[sy * w..(sy + 1) * w],
                            &mut dst[y * w..(y + 1) * w],
                            dx,
                            self.padding,
                        );
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let hw = h * w;
        let mut x = vec![0.0; self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let row = (c * kh + ky) * kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        unshift_row_add(
                            &src[y * w..(y + 1) * w],
                            &mut plane[sy * w..(sy + 1) * w],
                            dx,
                            self.padding,
                        );
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let k = self.patch_len();
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let wmat = ArrayView2::from_shape((self.out_channels, k), &self.weight).unwrap();
        par::for_each_chunk_mut(out.data_mut(), self.out_channels * hw, |i, dst| {
            let cols_owned;
            let cols: &[f64] = if self.is_pointwise() {
                x.sample(i)
            } else {
                cols_owned = self.im2col(x.sample(i), h, w);
                &cols_owned
            };
            for (o, b) in self.bias.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(*b);
            }
            let cmat = ArrayView2::from_shape((k, hw), cols).unwrap();
            let mut omat = ArrayViewMut2::from_shape((self.out_channels, hw), dst).unwrap();
            general_mat_mul(1.0, &wmat, &cmat, 1.0, &mut omat);
        });
        out
    }

    /// Returns the input gradient; parameter gradients are added to `grad`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grad: &mut Conv2d) -> Tensor {
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let k = self.patch_len();
        let wmat = ArrayView2::from_shape((self.out_channels, k), &self.weight).unwrap();
        let per_sample = par::map_range(n, |i| {
            let cols_owned;
            let cols: &[f64] = if self.is_pointwise() {
                x.sample(i)
            } else {
                cols_owned = self.im2col(x.sample(i), h, w);
                &cols_owned
            };
            let g = grad_out.sample(i);
            let gmat = ArrayView2::from_shape((self.out_channels, hw), g).unwrap();
            let cmat = ArrayView2::from_shape((k, hw), cols).unwrap();
            let mut dw = vec![0.0; self.out_channels * k];
            {
                let mut dwm =
                    ArrayViewMut2::from_shape((self.out_channels, k), &mut dw[..]).unwrap();
                general_mat_mul(1.0, &gmat, &cmat.t(), 0.0, &mut dwm);
            }
            let db: Vec<f64> = g.chunks(hw).map(|p| p.iter().sum()).collect();
            let mut dcols = vec![0.0; k * hw];
            {
                let mut dcm = ArrayViewMut2::from_shape((k, hw), &mut dcols[..]).unwrap();
                general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut dcm);
            }
            let dx = if self.is_pointwise() {
                dcols
            } else {
                self.col2im(&dcols, h, w)
            };
            (dx, dw, db)
        });
        let mut dx_all = Tensor::zeros(x.shape());
        for (i, (dx, dw, db)) in per_sample.into_iter().enumerate() {
            dx_all.sample_mut(i).copy_from_slice(&dx);
            grad.weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            grad.bias.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        }
        dx_all
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        let (kh, kw) = self.kernel;
        f(
            &join(prefix, "weight"),
            &[self.out_channels, self.in_channels, kh, kw],
            &self.weight,
        );
        f(&join(prefix, "bias"), &[self.out_channels], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Single-layer circular convolution: wraps horizontally, zero-pads
/// vertically. `kernel` is `[out][in][kh][kw]`.
pub fn circular_conv2d(
    input: &Tensor,
    kernel: &[f64],
    out_channels: usize,
    kernel_size: (usize, usize),
    bias: Option<&[f64]>,
) -> Tensor {
    let conv = Conv2d::from_weights(
        input.channels(),
        out_channels,
        kernel_size,
        Padding::Circular,
        kernel.to_vec(),
        bias.map_or_else(|| vec![0.0; out_channels], <[f64]>::to_vec),
    );
    conv.forward(input)
}

pub const NORM_EPS: f64 = 1e-5;

/// Instance normalization with the cross-channel mean correction:
/// `gamma * (a - mu_c) / s_c + beta + alpha * (mu_c - m) / v`.
///
/// With more than one level row, `gamma`, `beta`, `alpha` are selected per
/// batch item by its noise-level index (conditional variant).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNormPP {
    pub channels: usize,
    pub levels: usize,
    /// `[levels][channels]`
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub struct NormTape {
    xhat: Tensor,
    /// `1 / s_c` per (item, channel)
    inv_s: Vec<f64>,
    /// standardized channel means per (item, channel)
    nu: Vec<f64>,
    /// `1 / v` per item
    inv_v: Vec<f64>,
    rows: Vec<usize>,
}

impl InstanceNormPP {
    pub fn new(channels: usize, levels: usize) -> Self {
        InstanceNormPP {
            channels,
            levels,
            gamma: vec![1.0; channels * levels],
            beta: vec![0.0; channels * levels],
            alpha: vec![1.0; channels * levels],
        }
    }

    fn row(&self, level: usize) -> usize {
        if self.levels == 1 {
            0
        } else {
            level.min(self.levels - 1)
        }
    }

    pub fn forward(&self, x: &Tensor, levels: &[usize]) -> (Tensor, NormTape) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "norm channels");
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_s = vec![0.0; n * c];
        let mut nu = vec![0.0; n * c];
        let mut inv_v = vec![0.0; n];
        let rows: Vec<usize> = (0..n).map(|i| self.row(levels[i])).collect();
        for i in 0..n {
            let mut mu = vec![0.0; c];
            for ch in 0..c {
                let p = x.plane(i, ch);
                let m = p.iter().sum::<f64>() / hw;
                let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                mu[ch] = m;
                inv_s[i * c + ch] = is;
                for (d, v) in xhat.plane_mut(i, ch).iter_mut().zip(p) {
                    *d = (v - m) * is;
                }
            }
            let mm = mu.iter().sum::<f64>() / c as f64;
            let vv = mu.iter().map(|m| (m - mm) * (m - mm)).sum::<f64>() / c as f64;
            let iv = 1.0 / (vv + NORM_EPS).sqrt();
            inv_v[i] = iv;
            let r = rows[i] * c;
            for ch in 0..c {
                let nu_c = (mu[ch] - mm) * iv;
                nu[i * c + ch] = nu_c;
                let (g, b, a) = (self.gamma[r + ch], self.beta[r + ch], self.alpha[r + ch]);
                let shift = b + a * nu_c;
                let xh = xhat.plane(i, ch);
                for (o, v) in out.plane_mut(i, ch).iter_mut().zip(xh) {
                    *o = g * v + shift;
                }
            }
        }
        (
            out,
            NormTape {
                xhat,
                inv_s,
                nu,
                inv_v,
                rows,
            },
        )
    }

    pub fn backward(
        &self,
        tape: &NormTape,
        grad_out: &Tensor,
        grad: &mut InstanceNormPP,
    ) -> Tensor {
        let [n, c, h, w] = grad_out.shape();
        let hw = (h * w) as f64;
        let mut dx = Tensor::zeros(grad_out.shape());
        for i in 0..n {
            let r = tape.rows[i] * c;
            let mut big_g = vec![0.0; c];
            let mut dmu = vec![0.0; c];
            for ch in 0..c {
                let g = grad_out.plane(i, ch);
                let xh = tape.xhat.plane(i, ch);
                let sum_g: f64 = g.iter().sum();
                let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                big_g[ch] = sum_g;
                grad.gamma[r + ch] += sum_gx;
                grad.beta[r + ch] += sum_g;
                grad.alpha[r + ch] += tape.nu[i * c + ch] * sum_g;
                let k = self.gamma[r + ch] * tape.inv_s[i * c + ch];
                let (mg, mgx) = (sum_g / hw, sum_gx / hw);
                for ((d, gv), xv) in dx.plane_mut(i, ch).iter_mut().zip(g).zip(xh) {
                    *d = k * (gv - mg - xv * mgx);
                }
            }
            // Through the standardized channel means.
            let hvec: Vec<f64> = (0..c).map(|ch| self.alpha[r + ch] * big_g[ch]).collect();
            let nu = &tape.nu[i * c..(i + 1) * c];
            let mh = hvec.iter().sum::<f64>() / c as f64;
            let mhn = hvec.iter().zip(nu).map(|(a, b)| a * b).sum::<f64>() / c as f64;
            for ch in 0..c {
                dmu[ch] = tape.inv_v[i] * (hvec[ch] - mh - nu[ch] * mhn);
            }
            for ch in 0..c {
                let add = dmu[ch] / hw;
                dx.plane_mut(i, ch).iter_mut().for_each(|d| *d += add);
            }
        }
        dx
    }
}

impl Params for InstanceNormPP {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        let shape = [self.levels, self.channels];
        f(&join(prefix, "gamma"), &shape, &self.gamma);
        f(&join(prefix, "beta"), &shape, &self.beta);
        f(&join(prefix, "alpha"), &shape, &self.alpha);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "alpha"), &mut self.alpha);
    }
}

pub fn elu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { v.exp_m1() })
}

/// ELU backward from the activation output `y`.
pub fn elu_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= 0.0 {
            *d *= yv + 1.0;
        }
    }
    g
}

/// Average pooling over non-overlapping `(fy, fx)` blocks.
pub fn avg_pool(x: &Tensor, factor: (usize, usize)) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (fy, fx) = factor;
    let (oh, ow) = (h / fy, w / fx);
    let scale = 1.0 / (fy * fx) as f64;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                let oy = y / fy;
                for xx in 0..w {
                    dst[oy * ow + xx / fx] += src[y * w + xx] * scale;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad_out: &Tensor, factor: (usize, usize)) -> Tensor {
    let [n, c, oh, ow] = grad_out.shape();
    let (fy, fx) = factor;
    let mut g = upsample_nearest(grad_out, factor);
    g.scale(1.0 / (fy * fx) as f64);
    debug_assert_eq!(g.shape(), [n, c, oh * fy, ow * fx]);
    g
}

pub fn upsample_nearest(x: &Tensor, factor: (usize, usize)) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (fy, fx) = factor;
    let (oh, ow) = (h * fy, w * fx);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / fy) * w + xx / fx];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad_out: &Tensor, factor: (usize, usize)) -> Tensor {
    let mut g = avg_pool(grad_out, factor);
    g.scale((factor.0 * factor.1) as f64);
    g
}

/// Three per-pixel channels: normalized row in `[0, 1]`, `sin(phi)`,
/// `cos(phi)` where `phi = -pi + col * 2pi / W` is the column's azimuth.
pub fn coord_channels(batch: usize, height: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros([batch, 3, height, width]);
    for i in 0..batch {
        for y in 0..height {
            let row = if height > 1 {
                y as f64 / (height - 1) as f64
            } else {
                0.0
            };
            for x in 0..width {
                let phi = -PI + x as f64 * 2.0 * PI / width as f64;
                t.set(i, 0, y, x, row);
                t.set(i, 1, y, x, phi.sin());
                t.set(i, 2, y, x, phi.cos());
            }
        }
    }
    t
}

/// Pre-activation residual block: two (IN++ -> ELU -> conv3x3) stages plus
/// an identity or 1x1 shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub norm1: InstanceNormPP,
    pub conv1: Conv2d,
    pub norm2: InstanceNormPP,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

pub struct ResBlockTape {
    x: Tensor,
    norm1: NormTape,
    a1: Tensor,
    norm2: NormTape,
    a2: Tensor,
}

impl ResBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        levels: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        ResBlock {
            norm1: InstanceNormPP::new(in_channels, levels),
            conv1: Conv2d::new(in_channels, out_channels, (3, 3), padding, rng),
            norm2: InstanceNormPP::new(out_channels, levels),
            conv2: Conv2d::new(out_channels, out_channels, (3, 3), padding, rng),
            shortcut: (in_channels != out_channels)
                .then(|| Conv2d::new(in_channels, out_channels, (1, 1), padding, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor, levels: &[usize]) -> (Tensor, ResBlockTape) {
        let (h1, norm1) = self.norm1.forward(x, levels);
        let a1 = elu(&h1);
        let c1 = self.conv1.forward(&a1);
        let (h2, norm2) = self.norm2.forward(&c1, levels);
        let a2 = elu(&h2);
        let mut out = self.conv2.forward(&a2);
        match &self.shortcut {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        (
            out,
            ResBlockTape {
                x: x.clone(),
                norm1,
                a1,
                norm2,
                a2,
            },
        )
    }

    pub fn backward(&self, tape: &ResBlockTape, grad_out: &Tensor, grad: &mut ResBlock) -> Tensor {
        let g_a2 = self.conv2.backward(&tape.a2, grad_out, &mut grad.conv2);
        let g_h2 = elu_backward(&tape.a2, &g_a2);
        let g_c1 = self.norm2.backward(&tape.norm2, &g_h2, &mut grad.norm2);
        let g_a1 = self.conv1.backward(&tape.a1, &g_c1, &mut grad.conv1);
        let g_h1 = elu_backward(&tape.a1, &g_a1);
        let mut g_x = self.norm1.backward(&tape.norm1, &g_h1, &mut grad.norm1);
        match (&self.shortcut, &mut grad.shortcut) {
            (Some(s), Some(gs)) => g_x.add_assign(&s.backward(&tape.x, grad_out, gs)),
            _ => g_x.add_assign(grad_out),
        }
        g_x
    }
}

impl Params for ResBlock {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    /// Direct O(H W K) cross-correlation used as an oracle.
    fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let (kh, kw) = conv.kernel;
        let mut out = Tensor::zeros([n, conv.out_channels, h, w]);
        for i in 0..n {
            for o in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[o];
                        for c in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sy = y as isize + ky as isize - (kh / 2) as isize;
                                    let mut sx = xx as isize + kx as isize - (kw / 2) as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    match conv.padding {
                                        Padding::Circular => sx = sx.rem_euclid(w as isize),
                                        Padding::Zero if sx < 0 || sx >= w as isize => continue,
                                        Padding::Zero => {}
                                    }
                                    let wv = conv.weight[((o * cin + c) * kh + ky) * kw + kx];
                                    acc += wv * x.at(i, c, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.set(i, o, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for padding in [Padding::Circular, Padding::Zero] {
            for kernel in [(3, 3), (1, 3), (3, 5), (1, 1)] {
                let mut conv = Conv2d::new(3, 4, kernel, padding, &mut rng);
                conv.bias = vec![0.1, -0.2, 0.3, 0.0];
                let x = random_tensor([2, 3, 5, 7], 2);
                let diff = conv.forward(&x).max_abs_diff(&naive_conv(&x, &conv));
                assert!(diff < 1e-12, "{padding:?} {kernel:?}: {diff}");
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random_tensor([1, 1, 4, 6], 3);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(circular_conv2d(&x, &k, 1, (3, 3), None), x);
    }

    #[test]
    fn mean_kernel_wraps_whole_row() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 5.0, 9.0]).unwrap();
        let out = circular_conv2d(&x, &[1.0 / 3.0; 3], 1, (1, 3), None);
        for v in out.data() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_conv_commutes_with_column_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::new(2, 3, (3, 3), Padding::Circular, &mut rng);
        let x = random_tensor([1, 2, 6, 10], 5);
        for k in [1, 3, -4] {
            let a = conv.forward(&x.roll_cols(k));
            let b = conv.forward(&x).roll_cols(k);
            assert_eq!(a.max_abs_diff(&b), 0.0);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x and w, so the gradients can be checked
        // against exact inner products.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for padding in [Padding::Circular, Padding::Zero] {
            let mut conv = Conv2d::new(2, 3, (3, 3), padding, &mut rng);
            conv.bias.fill(0.0);
            let x = random_tensor([2, 2, 4, 5], 7);
            let g = random_tensor([2, 3, 4, 5], 8);
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let mut grad = conv.zeros_like();
            let dx = conv.backward(&x, &g, &mut grad);
            let y = conv.forward(&x);
            assert!((dot(&dx, &x) - dot(&y, &g)).abs() < 1e-10);
            let wdot: f64 = grad
                .weight
                .iter()
                .zip(&conv.weight)
                .map(|(a, b)| a * b)
                .sum();
            assert!((wdot - dot(&y, &g)).abs() < 1e-10);
        }
    }

    #[test]
    fn coord_channels_values() {
        let t = coord_channels(1, 4, 8);
        assert_eq!(t.shape(), [1, 3, 4, 8]);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 3, 0), 1.0);
        // Column W/2 sits at azimuth 0.
        assert_eq!(t.at(0, 1, 2, 4), 0.0);
        assert_eq!(t.at(0, 2, 2, 4), 1.0);
    }

    #[test]
    fn instance_norm_pp_constant_input_gives_zero() {
        let mut norm = InstanceNormPP::new(3, 1);
        norm.alpha.fill(0.0);
        let x = Tensor::from_vec(
            [1, 3, 2, 2],
            [1.0; 4]
                .iter()
                .chain(&[-2.0; 4])
                .chain(&[7.0; 4])
                .copied()
                .collect(),
        )
        .unwrap();
        let (y, _) = norm.forward(&x, &[0]);
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn instance_norm_pp_without_alpha_is_instance_norm() {
        let mut norm = InstanceNormPP::new(2, 1);
        norm.alpha.fill(0.0);
        let x = random_tensor([2, 2, 3, 3], 9);
        let (y, _) = norm.forward(&x, &[0, 0]);
        for i in 0..2 {
            for c in 0..2 {
                let p = y.plane(i, c);
                let m = p.iter().sum::<f64>() / 9.0;
                let v = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 9.0;
                assert!(m.abs() < 1e-12);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    fn numeric_input_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.clone();
                p.data_mut()[k] += eps;
                let mut m = x.clone();
                m.data_mut()[k] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn instance_norm_pp_gradient_matches_finite_differences() {
        let mut norm = InstanceNormPP::new(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in norm
            .gamma
            .iter_mut()
            .chain(&mut norm.beta)
            .chain(&mut norm.alpha)
        {
            *v = rng.gen_range(-1.5..1.5);
        }
        let x = random_tensor([2, 3, 3, 4], 11);
        let g = random_tensor([2, 3, 3, 4], 12);
        let levels = [0, 1];
        let loss = |t: &Tensor| -> f64 {
            let (y, _) = norm.forward(t, &levels);
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = norm.forward(&x, &levels);
        let mut grad = norm.zeros_like();
        let dx = norm.backward(&tape, &g, &mut grad);
        let num = numeric_input_grad(&loss, &x, 1e-5);
        let e = rel_err(&num, dx.data());
        assert!(e < 1e-6, "input grad rel err {e}");

        let base = norm.flatten();
        let analytic = grad.flatten();
        let numeric: Vec<f64> = (0..base.len())
            .map(|k| {
                let mut p = norm.clone();
                let mut v = base.clone();
                v[k] += 1e-6;
                p.unflatten(&v);
                let (yp, _) = p.forward(&x, &levels);
                v[k] -= 2e-6;
                p.unflatten(&v);
                let (ym, _) = p.forward(&x, &levels);
                yp.data()
                    .iter()
                    .zip(ym.data())
                    .zip(g.data())
                    .map(|((a, b), c)| (a - b) * c)
                    .sum::<f64>()
                    / 2e-6
            })
            .collect();
        assert!(rel_err(&numeric, &analytic) < 1e-6);
    }

    #[test]
    fn resblock_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = ResBlock::new(2, 3, 1, Padding::Circular, &mut rng);
        let x = random_tensor([1, 2, 4, 6], 14);
        let g = random_tensor([1, 3, 4, 6], 15);
        let loss = |t: &Tensor| -> f64 {
            let (y, _) = block.forward(t, &[0]);
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = block.forward(&x, &[0]);
        let mut grad = block.zeros_like();
        let dx = block.backward(&tape, &g, &mut grad);
        let num = numeric_input_grad(&loss, &x, 1e-5);
        assert!(rel_err(&num, dx.data()) < 1e-6);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = random_tensor([1, 2, 4, 8], 16);
        let g = random_tensor([1, 2, 2, 4], 17);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        let lhs = dot(&avg_pool(&x, (2, 2)), &g);
        let rhs = dot(&x, &avg_pool_backward(&g, (2, 2)));
        assert!((lhs - rhs).abs() < 1e-12);
        let g2 = random_tensor([1, 2, 4, 16], 18);
        let lhs = dot(&upsample_nearest(&x, (1, 2)), &g2);
        let rhs = dot(&x, &upsample_nearest_backward(&g2, (1, 2)));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
