use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::par;
use crate::tensor::{Real, Tensor};

/// Square-kernel, stride-1, zero-padded ("same") 2D convolution computed as
/// im2col followed by a GEMM per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch, in_ch, kernel, kernel]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal initialisation scaled by `gain`.
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = gain / fan_in.sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            weight,
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// `[in_ch, out_ch, k, k]` with both spatial axes reversed.
    fn flipped_kernel(&self) -> Vec<T> {
        let k = self.kernel;
        let mut out = vec![T::zero(); self.weight.len()];
        for co in 0..self.out_ch {
            for ci in 0..self.in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        out[((ci * self.out_ch + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            self.weight[((co * self.in_ch + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let k = self.patch_len();
        let mut y = Tensor::zeros(x.n, self.out_ch, h, w);
        par::for_each_chunk_mut(&mut y.data, self.out_ch * hw, |i, out| {
            for (co, row) in out.chunks_mut(hw).enumerate() {
                row.fill(self.bias[co]);
            }
            let sample = x.sample(i);
            let owned;
            let col: &[T] = if self.kernel == 1 {
                sample
            } else {
                owned = im2col(sample, self.in_ch, h, w, self.kernel);
                &owned
            };
            T::gemm(
                self.out_ch,
                k,
                hw,
                T::one(),
                &self.weight,
                (k as isize, 1),
                col,
                (hw as isize, 1),
                T::one(),
                out,
                (hw as isize, 1),
            );
        });
        y
    }

    /// Accumulates weight/bias gradients into `grad` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut Conv2d<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let k = self.patch_len();
        let flipped = need_dx.then(|| self.flipped_kernel());
        let per_sample = par::map_range(x.n, |i| {
            let sample = x.sample(i);
            let dy_i = dy.sample(i);
            let owned;
            let col: &[T] = if self.kernel == 1 {
                sample
            } else {
                owned = im2col(sample, self.in_ch, h, w, self.kernel);
                &owned
            };
            let mut dw = vec![T::zero(); self.out_ch * k];
            // dW = dY * col^T
            T::gemm(
                self.out_ch,
                hw,
                k,
                T::one(),
                dy_i,
                (hw as isize, 1),
                col,
                (1, hw as isize),
                T::zero(),
                &mut dw,
                (k as isize, 1),
            );
            let db: Vec<T> = dy_i.chunks(hw).map(|r| r.iter().copied().sum()).collect();
            let dx = need_dx.then(|| {
                // dX is the correlation of dY with the spatially flipped,
                // channel-transposed kernel.
                let flipped = flipped.as_ref().expect("flipped kernel");
                let kt = self.out_ch * self.kernel * self.kernel;
                let mut dx = vec![T::zero(); self.in_ch * hw];
                let owned;
                let dycol: &[T] = if self.kernel == 1 {
                    dy_i
                } else {
                    owned = im2col(dy_i, self.out_ch, h, w, self.kernel);
                    &owned
                };
                T::gemm(
                    self.in_ch,
                    kt,
                    hw,
                    T::one(),
                    flipped,
                    (kt as isize, 1),
                    dycol,
                    (hw as isize, 1),
                    T::zero(),
                    &mut dx,
                    (hw as isize, 1),
                );
                dx
            });
            (dw, db, dx)
        });

        let mut dx_all = need_dx.then(|| Tensor::zeros(x.n, x.c, h, w));
        for (i, (dw, db, dx)) in per_sample.into_iter().enumerate() {
            for (g, v) in grad.weight.iter_mut().zip(dw) {
                *g += v;
            }
            for (g, v) in grad.bias.iter_mut().zip(db) {
                *g += v;
            }
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.sample_mut(i).copy_from_slice(&dx);
            }
        }
        dx_all
    }
}

/// `[c, h, w] -> [c * k * k, h * w]` with zero padding `k / 2`. Every
/// element is written exactly once.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let zero = T::zero();
    let mut col = Vec::with_capacity(c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let x_lo = ((-dx).max(0) as usize).min(w);
                let x_hi = ((w as isize - dx).clamp(0, w as isize) as usize).max(x_lo);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo == x_hi {
                        col.resize(col.len() + w, zero);
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx_lo = (x_lo as isize + dx) as usize;
                    col.resize(col.len() + x_lo, zero);
                    col.extend_from_slice(&plane[src_row + sx_lo..src_row + sx_lo + (x_hi - x_lo)]);
                    col.resize(col.len() + (w - x_hi), zero);
                }
            }
        }
    }
    col
}
