use crate::par;
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalisation over the spatial plane with a
/// learned affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub struct NormCache<T> {
    xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per `(sample, channel)`.
    inv_std: Vec<T>,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        InstanceNorm {
            gamma: vec![T::zero(); self.gamma.len()],
            beta: vec![T::zero(); self.beta.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn plane_stats(plane: &[T]) -> (T, T) {
        let n = T::from_usize(plane.len()).unwrap();
        let mean = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        (mean, T::one() / (var + T::from_f64_lossy(NORM_EPS)).sqrt())
    }

    fn normalise(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let hw = x.plane_len();
        let stats = par::map_range(x.n * x.c, |p| Self::plane_stats(&x.data[p * hw..(p + 1) * hw]));
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        par::for_each_chunk_mut(&mut xhat.data, hw, |p, out| {
            let (mean, inv_std) = stats[p];
            for (o, &v) in out.iter_mut().zip(&x.data[p * hw..(p + 1) * hw]) {
                *o = (v - mean) * inv_std;
            }
        });
        (xhat, stats.into_iter().map(|(_, s)| s).collect())
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let (xhat, inv_std) = Self::normalise(x);
        let y = self.affine(&xhat);
        (y, NormCache { xhat, inv_std })
    }

    pub fn forward_inference(&self, x: &Tensor<T>) -> Tensor<T> {
        self.affine(&Self::normalise(x).0)
    }

    fn affine(&self, xhat: &Tensor<T>) -> Tensor<T> {
        let hw = xhat.plane_len();
        let c = xhat.c;
        let mut y = xhat.clone();
        for (p, plane) in y.data.chunks_mut(hw).enumerate() {
            let ch = p % c;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            plane.iter_mut().for_each(|v| *v = *v * g + b);
        }
        y
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>, grad: &mut InstanceNorm<T>) -> Tensor<T> {
        let hw = dy.plane_len();
        let c = dy.c;
        let n = T::from_usize(hw).unwrap();
        let xhat = &cache.xhat;
        for (p, plane) in dy.data.chunks(hw).enumerate() {
            let ch = p % c;
            let xh = &xhat.data[p * hw..(p + 1) * hw];
            grad.gamma[ch] += plane.iter().zip(xh).map(|(&g, &x)| g * x).sum::<T>();
            grad.beta[ch] += plane.iter().copied().sum::<T>();
        }
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        par::for_each_chunk_mut(&mut dx.data, hw, |p, out| {
            let gamma = self.gamma[p % c];
            let g = &dy.data[p * hw..(p + 1) * hw];
            let xh = &xhat.data[p * hw..(p + 1) * hw];
            let sum_g = g.iter().copied().sum::<T>() * gamma;
            let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * gamma;
            let scale = cache.inv_std[p] / n;
            for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                *o = scale * (n * gv * gamma - sum_g - xv * sum_gx);
            }
        });
        dx
    }
}
