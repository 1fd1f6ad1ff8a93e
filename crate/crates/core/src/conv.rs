//! Patch gathering (im2col) and the dense convolution kernels built on it.
//!
//! The lookup layer gathers feature *indices* through the same [`im2col`]
//! routine, so the patch order `(c, ky, kx)` is shared by both layer kinds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Scalar, Tensor, Trans};

/// Square-kernel 2D geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Geometry {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self { kernel, stride, padding, dilation }
    }

    /// `k x k` kernel, stride 1, "same" padding for odd `k`.
    pub fn same(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2, 1)
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Shape(format!("degenerate geometry {self:?}")));
        }
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::Shape(format!(
                "input extent {input} with padding {} is smaller than the kernel span {span}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn patch_len(&self, in_channels: usize) -> usize {
        in_channels * self.kernel * self.kernel
    }
}

/// Spatial layout of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: Geometry,
}

impl ConvShape {
    /// Validates an NCHW input against a `C_out x C_in x k x k` kernel.
    pub fn resolve(input: &[usize], kernel: &[usize], geom: Geometry) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::Shape(format!("conv input must be NCHW, got {input:?}")));
        }
        if kernel.len() != 4 || kernel[2] != geom.kernel || kernel[3] != geom.kernel {
            return Err(Error::Shape(format!(
                "kernel {kernel:?} does not match a {0}x{0} geometry",
                geom.kernel
            )));
        }
        if kernel[1] != input[1] {
            return Err(Error::Shape(format!(
                "kernel expects {} input channels, input has {}",
                kernel[1], input[1]
            )));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: kernel[0],
            out_h: geom.output_extent(input[2])?,
            out_w: geom.output_extent(input[3])?,
            geom,
        })
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.geom.patch_len(self.in_channels)
    }

    pub fn in_plane(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Multiply-accumulate pairs for the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.positions() * self.out_channels * self.patch_len()) as u64
    }
}

/// Gathers one sample (`C x H x W`) into a `positions x patch_len` matrix.
/// Out-of-image taps receive `pad`.
pub fn im2col<V: Copy>(sample: &[V], shape: &ConvShape, pad: V, cols: &mut [V]) {
    let g = shape.geom;
    let k = g.kernel;
    let patch = shape.patch_len();
    debug_assert_eq!(cols.len(), shape.positions() * patch);
    for oy in 0..shape.out_h {
        for ox in 0..shape.out_w {
            let row = &mut cols[(oy * shape.out_w + ox) * patch..][..patch];
            let mut t = 0;
            for c in 0..shape.in_channels {
                let plane = &sample[c * shape.in_h * shape.in_w..];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        row[t] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < shape.in_h
                            && (ix as usize) < shape.in_w
                        {
                            plane[iy as usize * shape.in_w + ix as usize]
                        } else {
                            pad
                        };
                        t += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `positions x patch_len` gradient matrix back onto one sample.
pub fn col2im<T: Scalar>(cols: &[T], shape: &ConvShape, sample_grad: &mut [T]) {
    let g = shape.geom;
    let k = g.kernel;
    let patch = shape.patch_len();
    for oy in 0..shape.out_h {
        for ox in 0..shape.out_w {
            let row = &cols[(oy * shape.out_w + ox) * patch..][..patch];
            let mut t = 0;
            for c in 0..shape.in_channels {
                let base = c * shape.in_h * shape.in_w;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < shape.in_h && (ix as usize) < shape.in_w {
                            sample_grad[base + iy as usize * shape.in_w + ix as usize] += row[t];
                        }
                        t += 1;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW input with a `C_out x C_in x k x k` kernel.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Geometry,
) -> Result<Tensor<T>> {
    let s = ConvShape::resolve(input.shape(), kernel.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [s.out_channels] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                s.out_channels
            )));
        }
    }
    let (p, ck) = (s.positions(), s.patch_len());
    let mut out = vec![T::zero(); s.batch * s.out_channels * p];
    let mut cols = vec![T::zero(); p * ck];
    for n in 0..s.batch {
        im2col(&input.data()[n * s.in_plane()..][..s.in_plane()], &s, T::zero(), &mut cols);
        let dst = &mut out[n * s.out_channels * p..][..s.out_channels * p];
        if let Some(b) = bias {
            for (kc, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[kc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        matmul_into(s.out_channels, ck, p, kernel.data(), Trans::No, &cols, Trans::Yes, beta, dst);
    }
    Tensor::new(s.output_shape().to_vec(), out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: Geometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = ConvShape::resolve(input.shape(), kernel.shape(), geom)?;
    if grad_out.shape() != s.output_shape() {
        return Err(Error::Shape("conv grad_out shape mismatch".into()));
    }
    let (p, ck) = (s.positions(), s.patch_len());
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_kernel = vec![T::zero(); kernel.len()];
    let mut d_bias = vec![T::zero(); s.out_channels];
    let mut cols = vec![T::zero(); p * ck];
    let mut d_cols = vec![T::zero(); p * ck];
    for n in 0..s.batch {
        let g = &grad_out.data()[n * s.out_channels * p..][..s.out_channels * p];
        for (kc, chunk) in g.chunks(p).enumerate() {
            d_bias[kc] += chunk.iter().copied().sum();
        }
        im2col(&input.data()[n * s.in_plane()..][..s.in_plane()], &s, T::zero(), &mut cols);
        // dK += g (C_out x P) @ cols (P x CK)
        matmul_into(s.out_channels, p, ck, g, Trans::No, &cols, Trans::No, T::one(), &mut d_kernel);
        // dcols = g^T (P x C_out) @ K (C_out x CK)
        matmul_into(p, s.out_channels, ck, g, Trans::Yes, kernel.data(), Trans::No, T::zero(), &mut d_cols);
        col2im(&d_cols, &s, &mut d_input[n * s.in_plane()..][..s.in_plane()]);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(kernel.shape().to_vec(), d_kernel)?,
        Tensor::new(vec![s.out_channels], d_bias)?,
    ))
}
