//! Samples, synthetic generation, splitting, batching and corruption.

mod batch;
mod corrupt;
mod io;
mod synthetic;

pub use batch::{BatchSource, BatchStream, CyclingPool};
pub use corrupt::{normalize, ood_corrupt, CorruptionConfig, IntensityRange, NormScope};
pub use io::{
    load_dataset, load_volume_dir, read_array, save_dataset, write_array, DatasetManifest, SplitMembership,
    ARRAY_MAGIC, DATASET_FORMAT_VERSION,
};
pub use synthetic::{generate_synthetic, ShapeKind, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image (`[1, C, D, H, W]`) with its mask when labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
}

/// A stacked batch; `masks` is present only for labelled data.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub masks: Option<Tensor<f32>>,
    pub ids: Vec<usize>,
}

impl ImageBatch {
    pub fn stack<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        if samples.is_empty() {
            return Err(Error::InsufficientData("cannot stack an empty batch".into()));
        }
        let images = Tensor::cat_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let masks = if samples.iter().all(|s| s.mask.is_some()) {
            Some(Tensor::cat_batch(
                &samples.iter().map(|s| s.mask.as_ref().expect("checked")).collect::<Vec<_>>(),
            )?)
        } else {
            None
        };
        Ok(ImageBatch {
            images,
            masks,
            ids: samples.iter().map(|s| s.id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Disjoint labelled / unlabelled / validation / test pools.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labelled: Vec<Sample>,
    /// Masks are stripped from this pool.
    pub unlabelled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn membership(&self) -> SplitMembership {
        let ids = |v: &[Sample]| v.iter().map(|s| s.id).collect();
        SplitMembership {
            labelled: ids(&self.labelled),
            unlabelled: ids(&self.unlabelled),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }
}

/// Seeded shuffle of `dataset` into pools of the requested sizes.
pub fn split(
    dataset: Vec<Sample>,
    n_labelled: usize,
    n_unlabelled: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let wanted = n_labelled + n_unlabelled + n_val + n_test;
    if wanted > dataset.len() {
        return Err(Error::InsufficientData(format!(
            "split needs {wanted} images, dataset has {}",
            dataset.len()
        )));
    }
    if n_labelled == 0 {
        return Err(Error::invalid("split", "labelled pool must be non-empty"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Sample>> = dataset.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<Sample> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("each index drawn once"))
            .collect()
    };
    let labelled = take(0..n_labelled);
    let unlabelled = take(n_labelled..n_labelled + n_unlabelled)
        .into_iter()
        .map(|s| Sample { mask: None, ..s })
        .collect();
    let validation = take(n_labelled + n_unlabelled..n_labelled + n_unlabelled + n_val);
    let test = take(n_labelled + n_unlabelled + n_val..wanted);
    Ok(DatasetSplit {
        labelled,
        unlabelled,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dummy(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|id| Sample {
                id,
                image: Tensor::full([1, 1, 1, 2, 2], id as f32),
                mask: Some(Tensor::zeros([1, 1, 1, 2, 2])),
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split(dummy(108), 4, 64, 8, 32, 1).unwrap();
        assert_eq!(
            (s.labelled.len(), s.unlabelled.len(), s.validation.len(), s.test.len()),
            (4, 64, 8, 32)
        );
        assert!(s.unlabelled.iter().all(|x| x.mask.is_none()));
        let m = s.membership();
        let all: Vec<usize> = [m.labelled, m.unlabelled, m.validation, m.test].concat();
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), all.len());
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = split(dummy(50), 3, 20, 5, 10, 7).unwrap().membership();
        let b = split(dummy(50), 3, 20, 5, 10, 7).unwrap().membership();
        let c = split(dummy(50), 3, 20, 5, 10, 8).unwrap().membership();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_request_fails() {
        assert!(matches!(split(dummy(10), 4, 4, 2, 1, 0), Err(Error::InsufficientData(_))));
        assert!(split(dummy(10), 0, 4, 2, 1, 0).is_err());
    }

    #[test]
    fn stacking_keeps_masks_only_when_all_present() {
        let mut d = dummy(3);
        let b = ImageBatch::stack(&d).unwrap();
        assert_eq!(b.images.shape(), [3, 1, 1, 2, 2]);
        assert!(b.masks.is_some());
        d[1].mask = None;
        assert!(ImageBatch::stack(&d).unwrap().masks.is_none());
        assert!(ImageBatch::stack(&[]).is_err());
    }
}
