use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{axpy, cast_vec, dot, sum, Scalar};

/// Zero-padded, stride-1 dilated convolution that preserves spatial size.
///
/// Weights are laid out `[out][in][ky][kx]`; activations are channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// One kernel tap: weight offset within an `[in]` slice and its spatial shift.
#[derive(Clone, Copy)]
struct Tap {
    offset: usize,
    dy: isize,
    dx: isize,
}

/// Rows and columns where `0 <= v + d < len`.
#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weights: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, kernel, dilation);
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut layer.weights {
            *w = T::from_f64(normal.sample(rng));
        }
        layer
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            dilation: self.dilation,
            weights: cast_vec(&self.weights),
            bias: cast_vec(&self.bias),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn taps(&self) -> Vec<Tap> {
        let k = self.kernel;
        let pad = (self.dilation * (k - 1) / 2) as isize;
        (0..k * k)
            .map(|t| Tap {
                offset: t,
                dy: (t / k * self.dilation) as isize - pad,
                dx: (t % k * self.dilation) as isize - pad,
            })
            .collect()
    }

    fn kernel_area(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Pre-activation output for an `in_channels x height x width` input.
    pub fn forward(&self, input: &[T], height: usize, width: usize) -> Vec<T> {
        let plane = height * width;
        assert_eq!(input.len(), self.in_channels * plane, "conv input size");
        let taps = self.taps();
        let ka = self.kernel_area();
        let mut out = vec![T::zero(); self.out_channels * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(o, out_plane)| {
            out_plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let in_plane = &input[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_channels + i) * ka;
                for tap in &taps {
                    let w = self.weights[wbase + tap.offset];
                    if tap.dy == 0 && tap.dx == 0 {
                        axpy(w, in_plane, out_plane);
                        continue;
                    }
                    let (y0, y1) = valid_range(tap.dy, height);
                    let (x0, x1) = valid_range(tap.dx, width);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + tap.dy) as usize;
                        let sx0 = (x0 as isize + tap.dx) as usize;
                        axpy(
                            w,
                            &in_plane[sy * width + sx0..sy * width + sx0 + (x1 - x0)],
                            &mut out_plane[y * width + x0..y * width + x1],
                        );
                    }
                }
            }
        });
        out
    }

    /// Parameter gradients, and the input gradient when `need_input_grad`.
    pub fn backward(
        &self,
        input: &[T],
        grad_out: &[T],
        height: usize,
        width: usize,
        need_input_grad: bool,
    ) -> (ConvGrad<T>, Option<Vec<T>>) {
        let plane = height * width;
        assert_eq!(input.len(), self.in_channels * plane, "conv input size");
        assert_eq!(grad_out.len(), self.out_channels * plane, "conv grad size");
        let taps = self.taps();
        let ka = self.kernel_area();

        let bias: Vec<T> = grad_out.chunks(plane).map(sum).collect();
        let mut weights = vec![T::zero(); self.weights.len()];
        weights
            .par_chunks_mut(self.in_channels * ka)
            .enumerate()
            .for_each(|(o, gw)| {
                let g_plane = &grad_out[o * plane..(o + 1) * plane];
                for i in 0..self.in_channels {
                    let in_plane = &input[i * plane..(i + 1) * plane];
                    for tap in &taps {
                        let acc = if tap.dy == 0 && tap.dx == 0 {
                            dot(g_plane, in_plane)
                        } else {
                            let (y0, y1) = valid_range(tap.dy, height);
                            let (x0, x1) = valid_range(tap.dx, width);
                            let mut acc = T::zero();
                            if x0 < x1 {
                                for y in y0..y1 {
                                    let sy = (y as isize + tap.dy) as usize;
                                    let sx0 = (x0 as isize + tap.dx) as usize;
                                    acc += dot(
                                        &g_plane[y * width + x0..y * width + x1],
                                        &in_plane[sy * width + sx0..sy * width + sx0 + (x1 - x0)],
                                    );
                                }
                            }
                            acc
                        };
                        gw[i * ka + tap.offset] = acc;
                    }
                }
            });

        let grad_in = need_input_grad.then(|| {
            let mut gin = vec![T::zero(); input.len()];
            gin.par_chunks_mut(plane).enumerate().for_each(|(i, gi)| {
                for o in 0..self.out_channels {
                    let g_plane = &grad_out[o * plane..(o + 1) * plane];
                    let wbase = (o * self.in_channels + i) * ka;
                    for tap in &taps {
                        let w = self.weights[wbase + tap.offset];
                        if tap.dy == 0 && tap.dx == 0 {
                            axpy(w, g_plane, gi);
                            continue;
                        }
                        let (y0, y1) = valid_range(tap.dy, height);
                        let (x0, x1) = valid_range(tap.dx, width);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + tap.dy) as usize;
                            let sx0 = (x0 as isize + tap.dx) as usize;
                            axpy(
                                w,
                                &g_plane[y * width + x0..y * width + x1],
                                &mut gi[sy * width + sx0..sy * width + sx0 + (x1 - x0)],
                            );
                        }
                    }
                }
            });
            gin
        });

        (ConvGrad { weights, bias }, grad_in)
    }
}

impl<T: Scalar> ConvGrad<T> {
    pub fn zeros_like(layer: &ConvLayer<T>) -> Self {
        Self { weights: vec![T::zero(); layer.weights.len()], bias: vec![T::zero(); layer.bias.len()] }
    }

    pub fn add_assign(&mut self, other: &ConvGrad<T>) {
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}
