//! Parameter-free layers.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, y) in dy.data_mut().iter_mut().zip(output.data()) {
        if *y <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Chain rule through an elementwise sigmoid, given its output.
pub fn sigmoid_backward<T: Scalar>(probabilities: &Tensor<T>, d_probabilities: &Tensor<T>) -> Tensor<T> {
    probabilities
        .zip_map(d_probabilities, |p, d| d * p * (T::one() - p))
        .expect("gradient matches its activation")
}

pub struct PoolCache {
    argmax: Vec<u32>,
    input_shape: [usize; 5],
}

fn pooled_dims([d, h, w]: [usize; 3], pool_depth: bool) -> [usize; 3] {
    [if pool_depth { d / 2 } else { d }, h / 2, w / 2]
}

/// 2x max pooling over height and width, and over depth when `pool_depth`.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>, pool_depth: bool) -> (Tensor<T>, PoolCache) {
    let [n, c, d, h, w] = x.shape();
    let [od, oh, ow] = pooled_dims([d, h, w], pool_depth);
    let kd = if pool_depth { 2 } else { 1 };
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            let s = &src[ch * in_plane..(ch + 1) * in_plane];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for a in 0..kd {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let idx = ((z * kd + a) * h + y * 2 + b) * w + xx * 2 + e;
                                    if s[idx] > best {
                                        best = s[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        dst[ch * out_plane + (z * oh + y) * ow + xx] = best;
                        argmax.push((ch * in_plane + best_idx) as u32);
                    }
                }
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            input_shape: x.shape(),
        },
    )
}

pub fn max_pool2_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(cache.input_shape);
    let per_out = dy.item_len();
    for i in 0..dy.batch() {
        let g = dy.item(i);
        let dst = dx.item_mut(i);
        for (j, &src_idx) in cache.argmax[i * per_out..(i + 1) * per_out].iter().enumerate() {
            dst[src_idx as usize] += g[j];
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling (depth doubled only when `up_depth`).
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>, up_depth: bool) -> Tensor<T> {
    let [n, c, d, h, w] = x.shape();
    let kd = if up_depth { 2 } else { 1 };
    let (od, oh, ow) = (d * kd, h * 2, w * 2);
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let srow = ch * in_plane + ((z / kd) * h + y / 2) * w;
                    let drow = ch * out_plane + (z * oh + y) * ow;
                    for xx in 0..ow {
                        dst[drow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Tensor<T>, up_depth: bool) -> Tensor<T> {
    let [n, c, od, oh, ow] = dy.shape();
    let kd = if up_depth { 2 } else { 1 };
    let (d, h, w) = (od / kd, oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, d, h, w]);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    for i in 0..n {
        let g = dy.item(i);
        let dst = dx.item_mut(i);
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let drow = ch * in_plane + ((z / kd) * h + y / 2) * w;
                    let srow = ch * out_plane + (z * oh + y) * ow;
                    for xx in 0..ow {
                        dst[drow + xx / 2] += g[srow + xx];
                    }
                }
            }
        }
    }
    dx
}

/// Mean over batch and all spatial positions: `[N, C, ...] -> [1, C, 1, 1, 1]`.
pub fn global_average_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = x.shape();
    let plane = x.plane();
    let count = (n * plane) as f64;
    let mut out = Tensor::zeros([1, c, 1, 1, 1]);
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.item(i)[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        out.data_mut()[ch] = T::from_f64(s / count);
    }
    out
}

pub fn global_average_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: [usize; 5]) -> Tensor<T> {
    let [n, c, d, h, w] = input_shape;
    let plane = d * h * w;
    let scale = T::from_f64(1.0 / (n * plane) as f64);
    let mut dx = Tensor::zeros(input_shape);
    for i in 0..n {
        let dst = dx.item_mut(i);
        for ch in 0..c {
            dst[ch * plane..(ch + 1) * plane].fill(dy.data()[ch] * scale);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_shapes_and_routing() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 8.]).unwrap();
        let (p, cache) = max_pool2(&x, false);
        assert_eq!(p.shape(), [1, 1, 1, 1, 2]);
        assert_eq!(p.data(), &[5., 9.]);
        let dy = Tensor::from_vec([1, 1, 1, 1, 2], vec![1., 2.]).unwrap();
        let dx = max_pool2_backward(&cache, &dy);
        assert_eq!(dx.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);

        let u = upsample_nearest2(&p, false);
        assert_eq!(u.shape(), [1, 1, 1, 2, 4]);
        assert_eq!(u.data(), &[5., 5., 9., 9., 5., 5., 9., 9.]);
        let back = upsample_nearest2_backward(&u, false);
        assert_eq!(back.data(), &[20., 36.]);
    }

    #[test]
    fn three_dimensional_pool_halves_depth() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let (p, _) = max_pool2(&x, true);
        assert_eq!(p.shape(), [1, 1, 1, 1, 1]);
        assert_eq!(p.data(), &[7.]);
        assert_eq!(upsample_nearest2(&p, true).shape(), [1, 1, 2, 2, 2]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-300);
    }

    #[test]
    fn global_pool_round_trip_gradient() {
        let x = Tensor::<f64>::from_vec([2, 2, 1, 1, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let p = global_average_pool(&x);
        assert_eq!(p.data(), &[(1. + 2. + 5. + 6.) / 4., (3. + 4. + 7. + 8.) / 4.]);
        let g = global_average_pool_backward(&Tensor::from_vec([1, 2, 1, 1, 1], vec![4., 8.]).unwrap(), x.shape());
        assert_eq!(g.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }
}
