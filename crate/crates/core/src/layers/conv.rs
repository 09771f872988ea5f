use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::rng::standard_normal;
use crate::tensor::{gemm, Op, Real, Shape, Tensor};

/// 2-D convolution without bias. Kernels are stored as a
/// `(c_out, c_in / groups, k_h, k_w)` tensor; output channel `i` only sees
/// the input channels of its own group.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Conv2d<T: Real = f64> {
    pub weight: Tensor<T>,
    pub grad: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution reads the input planes directly.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Samples per GEMM tile: enough columns for an efficient product while
    /// bounding the unfolded buffer. Depends only on the geometry, so
    /// results are independent of the thread count.
    fn tile(&self, n: usize) -> usize {
        let plane = self.out_plane().max(1);
        let by_cols = 2048usize.div_ceil(plane);
        let by_mem = ((1usize << 21) / (self.patch() * plane).max(1)).max(1);
        by_cols.min(by_mem).clamp(1, n.max(1))
    }
}

impl<T: Real> Conv2d<T> {
    /// Zero-initialised square-kernel convolution.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(config_err!(
                "groups {groups} must divide c_in {c_in} and c_out {c_out}"
            ));
        }
        if stride == 0 || kernel == 0 {
            return Err(config_err!("kernel and stride must be positive"));
        }
        let weight = Tensor::zeros((c_out, c_in / groups, kernel, kernel))?;
        let grad = weight.clone();
        Ok(Self {
            weight,
            grad,
            stride,
            padding,
            groups,
        })
    }

    pub fn with_weight(weight: Tensor<T>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let s = weight.shape();
        let mut conv = Self::new(s.c * groups, s.n, 1, stride, padding, groups)?;
        conv.grad = weight.zeros_like();
        conv.weight = weight;
        Ok(conv)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len()
    }

    /// He-normal initialisation with `fan_in = c_in / groups * k_h * k_w`.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / self.fan_in() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = T::of(std * standard_normal(rng));
        }
    }

    pub fn fan_in(&self) -> usize {
        let s = self.weight.shape();
        s.c * s.h * s.w
    }

    /// Output spatial size; trailing rows/cols that do not fill a whole
    /// stride step are dropped.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(shape_err!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(shape_err!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input.c
            ));
        }
        let (ho, wo) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels(), ho, wo))
    }

    fn geometry(&self, input: Shape) -> Result<Geometry> {
        let out = self.output_shape(input)?;
        let (kh, kw) = self.kernel();
        Ok(Geometry {
            cin_g: self.in_channels() / self.groups,
            cout_g: self.out_channels() / self.groups,
            kh,
            kw,
            h: input.h,
            w: input.w,
            ho: out.h,
            wo: out.w,
            stride: self.stride,
            pad: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let g = self.geometry(x.shape())?;
        let n = x.shape().n;
        let tile = g.tile(n);
        let wg_len = g.cout_g * g.patch();
        let weight = self.weight.data();
        let groups = self.groups;
        let per_tile = tile * out_shape.sample();
        let mut out = Tensor::zeros(out_shape)?;
        out.data_mut().par_chunks_mut(per_tile).enumerate().for_each(|(t, out_tile)| {
            let s0 = t * tile;
            let b = out_tile.len() / out_shape.sample();
            let cols_n = b * g.out_plane();
            let mut cols = vec![T::zero(); g.patch() * cols_n];
            let mut prod = vec![T::zero(); g.cout_g * cols_n];
            for grp in 0..groups {
                im2col_tile(x, s0, b, grp, &g, &mut cols);
                gemm(
                    g.cout_g,
                    g.patch(),
                    cols_n,
                    &weight[grp * wg_len..(grp + 1) * wg_len],
                    Op::N,
                    &cols,
                    Op::N,
                    T::zero(),
                    &mut prod,
                );
                scatter_tile(&prod, out_tile, b, grp, &g);
            }
        });
        Ok(out)
    }

    /// Gradients with respect to the input and the kernels.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let out_shape = self.output_shape(x.shape())?;
        if grad_out.shape() != out_shape {
            return Err(shape_err!(
                "conv grad_out {} does not match output {out_shape}",
                grad_out.shape()
            ));
        }
        let g = self.geometry(x.shape())?;
        let n = x.shape().n;
        let tile = g.tile(n);
        let wg_len = g.cout_g * g.patch();
        let weight = self.weight.data();
        let groups = self.groups;
        let in_sample = x.shape().sample();

        let mut grad_x = x.zeros_like();
        // Per-tile kernel gradients, summed afterwards in tile order so the
        // result does not depend on scheduling.
        let partials: Vec<Vec<T>> = grad_x
            .data_mut()
            .par_chunks_mut(tile * in_sample)
            .enumerate()
            .map(|(t, gx_tile)| {
                let s0 = t * tile;
                let b = gx_tile.len() / in_sample;
                let cols_n = b * g.out_plane();
                let mut cols = vec![T::zero(); g.patch() * cols_n];
                let mut go = vec![T::zero(); g.cout_g * cols_n];
                let mut gw = vec![T::zero(); groups * wg_len];
                for grp in 0..groups {
                    gather_tile(grad_out, s0, b, grp, &g, &mut go);
                    let wg = &weight[grp * wg_len..(grp + 1) * wg_len];
                    gemm(g.patch(), g.cout_g, cols_n, wg, Op::T, &go, Op::N, T::zero(), &mut cols);
                    col2im_tile(&cols, gx_tile, b, grp, &g);
                    im2col_tile(x, s0, b, grp, &g, &mut cols);
                    gemm(
                        g.cout_g,
                        cols_n,
                        g.patch(),
                        &go,
                        Op::N,
                        &cols,
                        Op::T,
                        T::zero(),
                        &mut gw[grp * wg_len..(grp + 1) * wg_len],
                    );
                }
                gw
            })
            .collect();
        let mut grad_w = self.weight.zeros_like();
        for part in partials {
            for (d, s) in grad_w.data_mut().iter_mut().zip(part) {
                *d += s;
            }
        }
        Ok((grad_x, grad_w))
    }

    /// Backward pass that adds the kernel gradient into `self.grad`.
    pub fn backward_acc(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gw) = self.backward(x, grad_out)?;
        self.grad.add_assign(&gw)?;
        Ok(gx)
    }
}

/// Unfold group `grp` of samples `s0..s0+b` into a
/// `(cin_g*kh*kw) x (b*ho*wo)` matrix; column `j*ho*wo + p` is output
/// position `p` of sample `s0 + j`.
fn im2col_tile<T: Real>(x: &Tensor<T>, s0: usize, b: usize, grp: usize, g: &Geometry, cols: &mut [T]) {
    let plane = g.out_plane();
    let cols_n = b * plane;
    let in_plane = g.h * g.w;
    for j in 0..b {
        let xs = x.sample(s0 + j);
        let xg = &xs[grp * g.cin_g * in_plane..(grp + 1) * g.cin_g * in_plane];
        let mut row = 0;
        for c in 0..g.cin_g {
            let xc = &xg[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut cols[row * cols_n + j * plane..row * cols_n + (j + 1) * plane];
                    if g.pointwise() {
                        dst.copy_from_slice(xc);
                        row += 1;
                        continue;
                    }
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_tile`]: scatter-add columns into the input gradient
/// tile (which holds samples `s0..s0+b` and is overwritten for group `grp`).
fn col2im_tile<T: Real>(cols: &[T], gx_tile: &mut [T], b: usize, grp: usize, g: &Geometry) {
    let plane = g.out_plane();
    let cols_n = b * plane;
    let in_plane = g.h * g.w;
    let sample = gx_tile.len() / b;
    for j in 0..b {
        let gxs = &mut gx_tile[j * sample..(j + 1) * sample];
        let gxg = &mut gxs[grp * g.cin_g * in_plane..(grp + 1) * g.cin_g * in_plane];
        gxg.fill(T::zero());
        let mut row = 0;
        for c in 0..g.cin_g {
            let gxc = &mut gxg[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let src = &cols[row * cols_n + j * plane..row * cols_n + (j + 1) * plane];
                    if g.pointwise() {
                        gxc.copy_from_slice(src);
                        row += 1;
                        continue;
                    }
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut gxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Copy a `cout_g x (b*ho*wo)` product into group `grp` of an output tile.
fn scatter_tile<T: Real>(prod: &[T], out_tile: &mut [T], b: usize, grp: usize, g: &Geometry) {
    let plane = g.out_plane();
    let cols_n = b * plane;
    let sample = out_tile.len() / b;
    for j in 0..b {
        for o in 0..g.cout_g {
            let dst = j * sample + (grp * g.cout_g + o) * plane;
            out_tile[dst..dst + plane].copy_from_slice(&prod[o * cols_n + j * plane..o * cols_n + (j + 1) * plane]);
        }
    }
}

/// Inverse of [`scatter_tile`]: gather group `grp` of samples `s0..s0+b`.
fn gather_tile<T: Real>(t: &Tensor<T>, s0: usize, b: usize, grp: usize, g: &Geometry, out: &mut [T]) {
    let plane = g.out_plane();
    let cols_n = b * plane;
    for j in 0..b {
        let ts = t.sample(s0 + j);
        for o in 0..g.cout_g {
            let src = (grp * g.cout_g + o) * plane;
            out[o * cols_n + j * plane..o * cols_n + (j + 1) * plane].copy_from_slice(&ts[src..src + plane]);
        }
    }
}
