use super::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Group normalisation over `(channels in group) x (voxels)` per batch item,
/// followed by a per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    groups: usize,
    eps: f64,
}

pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<f64>,
}

/// Four channels per group when the width allows it, otherwise a single group.
pub fn default_groups(channels: usize) -> usize {
    if channels.is_multiple_of(4) {
        channels / 4
    } else {
        1
    }
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_groups(channels, default_groups(channels))
    }

    pub fn with_groups(channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels.is_multiple_of(groups), "channels must split evenly into groups");
        GroupNorm {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let [n, c, ..] = x.shape();
        assert_eq!(c, self.channels(), "norm channels");
        let plane = x.plane();
        let per_group = c / self.groups * plane;
        let cpg = c / self.groups;
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            let src = x.item(i);
            let xh = normalized.item_mut(i);
            for g in 0..self.groups {
                let range = g * per_group..(g + 1) * per_group;
                let vals = &src[range.clone()];
                let mean = vals.iter().map(|v| v.as_f64()).sum::<f64>() / per_group as f64;
                let var = vals.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per_group as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std.push(istd);
                for (o, v) in xh[range].iter_mut().zip(vals) {
                    *o = T::from_f64((v.as_f64() - mean) * istd);
                }
            }
            let o = out.item_mut(i);
            for ch in 0..c {
                let (gm, bt) = (self.gamma.data[ch], self.beta.data[ch]);
                let r = ch * plane..(ch + 1) * plane;
                for (dst, v) in o[r.clone()].iter_mut().zip(&xh[r]) {
                    *dst = *v * gm + bt;
                }
            }
            debug_assert_eq!(cpg * self.groups, c);
        }
        (out, NormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>, mut grads: Option<&mut Self>) -> Tensor<T> {
        let [n, c, ..] = dy.shape();
        let plane = dy.plane();
        let cpg = c / self.groups;
        let m = (cpg * plane) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![0.0f64; cpg * plane];
        for i in 0..n {
            let dyi = dy.item(i);
            let xh = cache.normalized.item(i);
            if let Some(g) = grads.as_deref_mut() {
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let mut sg = T::zero();
                    let mut sb = T::zero();
                    for (d, x) in dyi[r.clone()].iter().zip(&xh[r]) {
                        sg += *d * *x;
                        sb += *d;
                    }
                    g.gamma.data[ch] += sg;
                    g.beta.data[ch] += sb;
                }
            }
            let dxi = dx.item_mut(i);
            for grp in 0..self.groups {
                let istd = cache.inv_std[i * self.groups + grp];
                let base = grp * cpg * plane;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for (j, slot) in dxhat.iter_mut().enumerate() {
                    let ch = grp * cpg + j / plane;
                    let v = dyi[base + j].as_f64() * self.gamma.data[ch].as_f64();
                    *slot = v;
                    sum_d += v;
                    sum_dx += v * xh[base + j].as_f64();
                }
                for (j, v) in dxhat.iter().enumerate() {
                    let xhat = xh[base + j].as_f64();
                    dxi[base + j] = T::from_f64(istd / m * (m * v - sum_d - xhat * sum_dx));
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_each_group() {
        let norm = GroupNorm::<f64>::with_groups(4, 2);
        let x = Tensor::from_vec([1, 4, 1, 1, 3], (0..12).map(|v| (v * v) as f64).collect()).unwrap();
        let (y, _) = norm.forward(&x);
        for g in 0..2 {
            let vals = &y.item(0)[g * 6..(g + 1) * 6];
            let mean = vals.iter().sum::<f64>() / 6.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut norm = GroupNorm::<f64>::with_groups(4, 2);
        norm.gamma.data.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
        norm.beta.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let shape = [2, 4, 1, 2, 3];
        let x = Tensor::from_vec(shape, (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let r = Tensor::from_vec(shape, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let loss = |n: &GroupNorm<f64>, x: &Tensor<f64>| -> f64 {
            n.forward(x).0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = norm.forward(&x);
        let mut grads = norm.zeros_like();
        let dx = norm.backward(&cache, &r, Some(&mut grads));
        let h = 1e-6;
        for idx in [0, 13, 30, 47] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-6, "{fd} vs {}", dx.data()[idx]);
        }
        for ch in 0..4 {
            let mut p = norm.clone();
            p.gamma.data[ch] += h;
            let mut m = norm.clone();
            m.gamma.data[ch] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads.gamma.data[ch]).abs() < 1e-6);
        }
    }
}
