//! Layers with explicit forward/backward passes.
//!
//! Forward functions return whatever the backward pass needs; backward
//! functions accumulate parameter gradients into a zero-initialised twin of
//! the layer and return the input gradient.

mod conv;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use norm::{InstanceNorm, NormCache};
pub use pool::{max_pool2, max_pool2_backward, upsample2, upsample2_backward, PoolCache};

use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu_inplace<T: Real>(t: &mut Tensor<T>) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    t.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= slope;
        }
    });
}

/// Gradient through a leaky ReLU given its output (the sign of the output
/// equals the sign of the input for a positive slope).
pub fn leaky_relu_backward_inplace<T: Real>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    for (g, &y) in grad.data.iter_mut().zip(&out.data) {
        if y <= T::zero() {
            *g *= slope;
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data.iter_mut().for_each(|v| *v = sigmoid(*v));
}

/// Converts a gradient w.r.t. sigmoid outputs into one w.r.t. its logits.
pub fn sigmoid_backward<T: Real>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &p) in g.data.iter_mut().zip(&out.data) {
        *gv *= p * (T::one() - p);
    }
    g
}

/// Convolution followed by instance normalisation and, optionally, a leaky
/// ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub norm: InstanceNorm<T>,
    pub activate: bool,
}

pub struct ConvUnitCache<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    output: Tensor<T>,
}

impl<T: Real> ConvUnit<T> {
    pub fn new(conv: Conv2d<T>, activate: bool) -> Self {
        let norm = InstanceNorm::new(conv.out_ch);
        ConvUnit {
            conv,
            norm,
            activate,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvUnit {
            conv: self.conv.zeros_like(),
            norm: self.norm.zeros_like(),
            activate: self.activate,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.norm.forward_inference(&self.conv.forward(x));
        if self.activate {
            leaky_relu_inplace(&mut y);
        }
        y
    }

    pub fn forward_train(&self, x: Tensor<T>) -> (Tensor<T>, ConvUnitCache<T>) {
        let conv_out = self.conv.forward(&x);
        let (mut y, norm) = self.norm.forward(&conv_out);
        drop(conv_out);
        if self.activate {
            leaky_relu_inplace(&mut y);
        }
        let cache = ConvUnitCache {
            input: x,
            norm,
            output: y.clone(),
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &ConvUnitCache<T>,
        mut dy: Tensor<T>,
        grad: &mut ConvUnit<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        if self.activate {
            leaky_relu_backward_inplace(&cache.output, &mut dy);
        }
        let d_conv = self.norm.backward(&cache.norm, &dy, &mut grad.norm);
        self.conv
            .backward(&cache.input, &d_conv, &mut grad.conv, need_dx)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }
}
