use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, ImageBatch, Sample};
use crate::error::{Error, Result};

/// Where the trainer pulls its per-step sub-batches from.
pub trait BatchSource {
    fn labelled_batch(&mut self) -> Result<ImageBatch>;
    fn unlabelled_batch(&mut self) -> Result<ImageBatch>;
}

/// Endless shuffled pass over `0..len`, reshuffled on exhaustion.
#[derive(Clone, Debug)]
pub struct CyclingPool {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl CyclingPool {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InsufficientData("cannot cycle over an empty pool".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(CyclingPool { order, cursor: 0, rng })
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

/// Yields `labelled_bs` labelled and `labelled_bs * ratio` unlabelled
/// samples per step; the two pools cycle independently.
pub struct BatchStream<'a> {
    split: &'a DatasetSplit,
    labelled_bs: usize,
    ratio: usize,
    labelled: CyclingPool,
    unlabelled: Option<CyclingPool>,
    seed: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(split: &'a DatasetSplit, labelled_bs: usize, ratio: usize, seed: u64) -> Result<Self> {
        if labelled_bs == 0 {
            return Err(Error::invalid("labelled_bs", "must be at least 1"));
        }
        if ratio == 0 {
            return Err(Error::invalid("ratio", "must be at least 1"));
        }
        Ok(BatchStream {
            split,
            labelled_bs,
            ratio,
            labelled: CyclingPool::new(split.labelled.len(), seed)?,
            unlabelled: None,
            seed,
        })
    }

    pub fn unlabelled_size(&self) -> usize {
        self.labelled_bs * self.ratio
    }

    fn gather(pool: &[Sample], idx: &[usize]) -> Result<ImageBatch> {
        ImageBatch::stack(idx.iter().map(|&i| &pool[i]))
    }
}

impl BatchSource for BatchStream<'_> {
    fn labelled_batch(&mut self) -> Result<ImageBatch> {
        let idx = self.labelled.take(self.labelled_bs);
        Self::gather(&self.split.labelled, &idx)
    }

    fn unlabelled_batch(&mut self) -> Result<ImageBatch> {
        if self.unlabelled.is_none() {
            self.unlabelled = Some(CyclingPool::new(
                self.split.unlabelled.len(),
                self.seed ^ 0x9e37_79b9_7f4a_7c15,
            )?);
        }
        let n = self.unlabelled_size();
        let idx = self.unlabelled.as_mut().expect("initialised").take(n);
        Self::gather(&self.split.unlabelled, &idx)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<(ImageBatch, ImageBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.labelled_batch().and_then(|l| Ok((l, self.unlabelled_batch()?))))
    }
}
