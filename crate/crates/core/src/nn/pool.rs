use crate::tensor::{Real, Tensor};

/// Flat input index of the maximum for each pooled output element.
pub struct PoolCache {
    argmax: Vec<u32>,
    input_shape: [usize; 4],
}

/// 2x2 max pooling with stride 2. Spatial dims must be even.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, PoolCache) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max_pool2 needs even spatial dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut argmax = vec![0u32; y.len()];
    let hw = x.plane_len();
    for p in 0..x.n * x.c {
        let base = p * hw;
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * yy * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * yy + dy) * x.w + 2 * xx + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + yy * ow + xx;
                y.data[o] = x.data[best];
                argmax[o] = best as u32;
            }
        }
    }
    (
        y,
        PoolCache {
            argmax,
            input_shape: x.shape(),
        },
    )
}

pub fn max_pool2_backward<T: Real>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = cache.input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&g, &idx) in dy.data.iter().zip(&cache.argmax) {
        dx.data[idx as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for (src, dst) in x.data.chunks(x.plane_len()).zip(y.data.chunks_mut(oh * ow)) {
        for yy in 0..oh {
            let srow = &src[(yy / 2) * x.w..(yy / 2 + 1) * x.w];
            let drow = &mut dst[yy * ow..(yy + 1) * ow];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks(dy.plane_len()).zip(dx.data.chunks_mut(h * w)) {
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_block_maxima_and_routes_gradient() {
        let x = Tensor::<f32>::from_vec(
            1,
            1,
            2,
            4,
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0],
        )
        .unwrap();
        let (y, cache) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dx = max_pool2_backward(&cache, &Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap());
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_vec(1, 2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let up = upsample2(&x);
        assert_eq!(up.shape(), [1, 2, 4, 6]);
        let g = Tensor::<f64>::from_vec(1, 2, 4, 6, (0..48).map(|v| (v as f64).sin()).collect()).unwrap();
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
