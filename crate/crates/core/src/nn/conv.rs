use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{join, Module, Param};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Stride-1, same-padded convolution over `[depth, height, width]`.
///
/// A 2-D layer is a kernel of depth 1; padding is `kernel / 2` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
}

impl<T: Scalar> Conv<T> {
    /// He-normal initialised weights, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "kernel sizes must be odd");
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let mut weight = Param::zeros(vec![out_channels, in_channels, kernel[0], kernel[1], kernel[2]]);
        for w in weight.data.iter_mut() {
            *w = T::from_f64(normal.sample(rng));
        }
        Conv {
            weight,
            bias: Param::zeros(vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, d, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let p = d * h * w;
        let k = self.in_channels * self.taps();
        let mut out = Tensor::zeros([n, self.out_channels, d, h, w]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for i in 0..n {
            let src: &[T] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), [d, h, w], &mut col);
                &col
            };
            let dst = out.item_mut(i);
            gemm(false, false, self.out_channels, k, p, &self.weight.data, src, dst, false);
            for (co, b) in self.bias.data.iter().enumerate() {
                for v in &mut dst[co * p..(co + 1) * p] {
                    *v += *b;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient (when `need_input_grad`).
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grads: Option<&mut Self>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, _, d, h, w] = x.shape();
        let p = d * h * w;
        let k = self.in_channels * self.taps();
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcol = vec![T::zero(); if need_input_grad && !pointwise { k * p } else { 0 }];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let dyi = dy.item(i);
            if let Some(g) = grads.as_deref_mut() {
                let src: &[T] = if pointwise {
                    x.item(i)
                } else {
                    self.im2col(x.item(i), [d, h, w], &mut col);
                    &col
                };
                gemm(false, true, self.out_channels, p, k, dyi, src, &mut g.weight.data, true);
                for (co, gb) in g.bias.data.iter_mut().enumerate() {
                    *gb += dyi[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    gemm(true, false, k, self.out_channels, p, &self.weight.data, dyi, dx.item_mut(i), false);
                } else {
                    gemm(true, false, k, self.out_channels, p, &self.weight.data, dyi, &mut dcol, false);
                    self.col2im(&dcol, [d, h, w], dx.item_mut(i));
                }
            }
        }
        dx
    }

    fn offsets(&self) -> [isize; 3] {
        [
            (self.kernel[0] / 2) as isize,
            (self.kernel[1] / 2) as isize,
            (self.kernel[2] / 2) as isize,
        ]
    }

    fn im2col(&self, input: &[T], [d, h, w]: [usize; 3], col: &mut [T]) {
        let p = d * h * w;
        let [kd, kh, kw] = self.kernel;
        let pad = self.offsets();
        for ci in 0..self.in_channels {
            let src = &input[ci * p..(ci + 1) * p];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        let dst = &mut col[row * p..(row + 1) * p];
                        let (oz, oy, ox) = (kz as isize - pad[0], ky as isize - pad[1], kx as isize - pad[2]);
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        for z in 0..d {
                            let sz = z as isize + oz;
                            for y in 0..h {
                                let sy = y as isize + oy;
                                let line = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                                if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || x0 >= x1 {
                                    line.fill(T::zero());
                                    continue;
                                }
                                let base = (sz as usize * h + sy as usize) * w;
                                line[..x0].fill(T::zero());
                                line[x1..].fill(T::zero());
                                let s0 = (x0 as isize + ox) as usize;
                                line[x0..x1].copy_from_slice(&src[base + s0..base + s0 + (x1 - x0)]);
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], [d, h, w]: [usize; 3], out: &mut [T]) {
        let p = d * h * w;
        let [kd, kh, kw] = self.kernel;
        let pad = self.offsets();
        out.fill(T::zero());
        for ci in 0..self.in_channels {
            let dst = &mut out[ci * p..(ci + 1) * p];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        let src = &col[row * p..(row + 1) * p];
                        let (oz, oy, ox) = (kz as isize - pad[0], ky as isize - pad[1], kx as isize - pad[2]);
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for z in 0..d {
                            let sz = z as isize + oz;
                            if sz < 0 || sz >= d as isize {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + oy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let line = &src[(z * h + y) * w..(z * h + y + 1) * w];
                                let base = (sz as usize * h + sy as usize) * w;
                                let s0 = (x0 as isize + ox) as usize;
                                for (t, v) in dst[base + s0..base + s0 + (x1 - x0)]
                                    .iter_mut()
                                    .zip(&line[x0..x1])
                                {
                                    *t += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
