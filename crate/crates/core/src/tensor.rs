//! Dense `[batch, channels, depth, height, width]` arrays.
//!
//! Two-dimensional data is stored with `depth == 1`, so every layer works on
//! one layout regardless of spatial rank.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 5], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }
    /// Number of voxels per channel.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }
    /// Number of values per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }
    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                context,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Items `[start, end)` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.shape[0], "batch slice out of range");
        let len = self.item_len();
        let mut shape = self.shape;
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cat_batch", "no tensors to concatenate"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "cat_batch",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Channel-wise concatenation of two tensors sharing batch and spatial dims.
pub(crate) fn cat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape[0], b.shape[0]);
    assert_eq!(a.spatial(), b.spatial());
    let mut shape = a.shape;
    shape[1] += b.shape[1];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..a.shape[0] {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor { shape, data }
}

/// Inverse of [`cat_channels`]: splits after `first` channels.
pub(crate) fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, d, h, w] = x.shape;
    let plane = d * h * w;
    let mut a = Tensor::zeros([n, first, d, h, w]);
    let mut b = Tensor::zeros([n, c - first, d, h, w]);
    for i in 0..n {
        let item = x.item(i);
        a.item_mut(i).copy_from_slice(&item[..first * plane]);
        b.item_mut(i).copy_from_slice(&item[first * plane..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_split_inverts_concat() {
        let a = Tensor::<f64>::from_vec([2, 1, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec([2, 2, 1, 1, 2], (0..8).map(|x| x as f64).collect()).unwrap();
        let c = cat_channels(&a, &b);
        assert_eq!(c.shape(), [2, 3, 1, 1, 2]);
        assert_eq!(c.item(1), &[3., 4., 4., 5., 6., 7.]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
