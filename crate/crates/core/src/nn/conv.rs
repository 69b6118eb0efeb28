use rand::Rng;

use super::{join, Init, Mode, Module, Param, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial output length of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, OH*OW]` patch matrix.
fn im2col<T: Scalar>(img: &[T], g: &Geometry, out: &mut [T]) {
    let ncols = g.cols();
    let zero = T::zero();
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let dst = &mut dst_row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(zero);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kj - pad, contiguous in ox
                        let off = kj as isize - g.pad as isize;
                        let lo = ((-off).max(0) as usize).min(g.ow);
                        let hi = (g.w as isize - off).clamp(lo as isize, g.ow as isize) as usize;
                        dst[..lo].fill(zero);
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        dst[hi..].fill(zero);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                zero
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back into an image.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &src_row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = Param::new(init.sample(&shape, in_channels * kernel * kernel, rng), true);
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_channels]), false));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias,
            cache: None,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let oh = conv_output_size(h, self.kernel, self.stride, self.pad);
        let ow = conv_output_size(w, self.kernel, self.stride, self.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Geometry {
                channels: self.in_channels,
                h,
                w,
                k: self.kernel,
                stride: self.stride,
                pad: self.pad,
                oh,
                ow,
            }),
            _ => Err(Error::Shape(format!(
                "input {h}x{w} too small for kernel {} with padding {}",
                self.kernel, self.pad
            ))),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let g = self.geometry(h, w)?;
        let (rows, ncols) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut out = Tensor::zeros(&[n, self.out_channels, g.oh, g.ow]);
        let in_plane = c * h * w;
        let out_plane = self.out_channels * ncols;
        for i in 0..n {
            im2col(&x.data()[i * in_plane..(i + 1) * in_plane], &g, &mut cols);
            let dst = &mut out.data_mut()[i * out_plane..(i + 1) * out_plane];
            if let Some(b) = &self.bias {
                for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                    chunk.fill(b.value.data()[o]);
                }
            }
            let beta = if self.bias.is_some() { T::one() } else { T::zero() };
            unsafe {
                T::gemm(
                    self.out_channels,
                    rows,
                    ncols,
                    T::one(),
                    self.weight.value.data().as_ptr(),
                    rows as isize,
                    1,
                    cols.as_ptr(),
                    ncols as isize,
                    1,
                    beta,
                    dst.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
        }
        self.cache = mode.is_train().then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("conv backward without a training forward".into()))?;
        let (n, c, h, w) = x.dims4()?;
        let g = self.geometry(h, w)?;
        let (rows, ncols) = (g.rows(), g.cols());
        if dy.shape() != [n, self.out_channels, g.oh, g.ow] {
            return Err(Error::Shape(format!(
                "conv backward got gradient {:?}",
                dy.shape()
            )));
        }
        let mut cols = vec![T::zero(); rows * ncols];
        let mut dcols = vec![T::zero(); rows * ncols];
        let mut dx = need_dx.then(|| Tensor::zeros(&[n, c, h, w]));
        let in_plane = c * h * w;
        let out_plane = self.out_channels * ncols;
        for i in 0..n {
            let dyi = &dy.data()[i * out_plane..(i + 1) * out_plane];
            im2col(&x.data()[i * in_plane..(i + 1) * in_plane], &g, &mut cols);
            unsafe {
                // dW += dy @ cols^T
                T::gemm(
                    self.out_channels,
                    ncols,
                    rows,
                    T::one(),
                    dyi.as_ptr(),
                    ncols as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    ncols as isize,
                    T::one(),
                    self.weight.grad.data_mut().as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            if let Some(b) = &mut self.bias {
                for (o, chunk) in dyi.chunks(ncols).enumerate() {
                    let mut s = T::zero();
                    for &v in chunk {
                        s += v;
                    }
                    b.grad.data_mut()[o] += s;
                }
            }
            if let Some(dx) = &mut dx {
                unsafe {
                    // dcols = W^T @ dy
                    T::gemm(
                        rows,
                        self.out_channels,
                        ncols,
                        T::one(),
                        self.weight.value.data().as_ptr(),
                        1,
                        rows as isize,
                        dyi.as_ptr(),
                        ncols as isize,
                        1,
                        T::zero(),
                        dcols.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
                col2im(&dcols, &g, &mut dx.data_mut()[i * in_plane..(i + 1) * in_plane]);
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Transposed 2-D convolution, weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel, kernel];
        let weight = Param::new(init.sample(&shape, out_channels * kernel * kernel, rng), true);
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_channels]), false));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias,
            cache: None,
        }
    }

    /// Geometry of the equivalent forward convolution mapping output to input.
    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let up = |v: usize| (v - 1) * self.stride + self.kernel;
        let (oh, ow) = (up(h), up(w));
        if oh <= 2 * self.pad || ow <= 2 * self.pad {
            return Err(Error::Shape(format!("transposed conv input {h}x{w} too small")));
        }
        Ok(Geometry {
            channels: self.out_channels,
            h: oh - 2 * self.pad,
            w: ow - 2 * self.pad,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            oh: h,
            ow: w,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let g = self.geometry(h, w)?;
        let (rows, ncols) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut out = Tensor::zeros(&[n, self.out_channels, g.h, g.w]);
        let in_plane = c * ncols;
        let out_plane = self.out_channels * g.h * g.w;
        for i in 0..n {
            unsafe {
                // cols = W^T @ x
                T::gemm(
                    rows,
                    c,
                    ncols,
                    T::one(),
                    self.weight.value.data().as_ptr(),
                    1,
                    rows as isize,
                    x.data()[i * in_plane..].as_ptr(),
                    ncols as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            let dst = &mut out.data_mut()[i * out_plane..(i + 1) * out_plane];
            col2im(&cols, &g, dst);
            if let Some(b) = &self.bias {
                for (o, chunk) in dst.chunks_mut(g.h * g.w).enumerate() {
                    let bv = b.value.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.cache = mode.is_train().then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Shape("transposed conv backward without a training forward".into())
        })?;
        let (n, c, h, w) = x.dims4()?;
        let g = self.geometry(h, w)?;
        let (rows, ncols) = (g.rows(), g.cols());
        if dy.shape() != [n, self.out_channels, g.h, g.w] {
            return Err(Error::Shape(format!(
                "transposed conv backward got gradient {:?}",
                dy.shape()
            )));
        }
        let mut cols = vec![T::zero(); rows * ncols];
        let mut dx = need_dx.then(|| Tensor::zeros(&[n, c, h, w]));
        let in_plane = c * ncols;
        let out_plane = self.out_channels * g.h * g.w;
        for i in 0..n {
            let dyi = &dy.data()[i * out_plane..(i + 1) * out_plane];
            im2col(dyi, &g, &mut cols);
            let xi = &x.data()[i * in_plane..(i + 1) * in_plane];
            unsafe {
                // dW += x @ cols^T
                T::gemm(
                    c,
                    ncols,
                    rows,
                    T::one(),
                    xi.as_ptr(),
                    ncols as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    ncols as isize,
                    T::one(),
                    self.weight.grad.data_mut().as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            if let Some(b) = &mut self.bias {
                for (o, chunk) in dyi.chunks(g.h * g.w).enumerate() {
                    let mut s = T::zero();
                    for &v in chunk {
                        s += v;
                    }
                    b.grad.data_mut()[o] += s;
                }
            }
            if let Some(dx) = &mut dx {
                unsafe {
                    // dx = W @ cols
                    T::gemm(
                        c,
                        rows,
                        ncols,
                        T::one(),
                        self.weight.value.data().as_ptr(),
                        rows as isize,
                        1,
                        cols.as_ptr(),
                        ncols as isize,
                        1,
                        T::zero(),
                        dx.data_mut()[i * in_plane..].as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}
