//! Epoch-partition task batch sampler.
//!
//! Each epoch shuffles the task indices once and serves them in
//! non-overlapping chunks of `k`; the remainder that does not fill a chunk
//! is dropped. With `k` equal to the dataset size a batch is exactly a
//! permutation of the whole dataset.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    k: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(dataset_size: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if k > dataset_size {
            return Err(Error::Config(format!(
                "batch size {k} exceeds dataset size {dataset_size}"
            )));
        }
        let mut s = BatchSampler {
            order: (0..dataset_size).collect(),
            k,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Batches per epoch: `floor(dataset_size / k)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.k
    }

    /// Next batch of `k` distinct task indices. Reshuffles when the
    /// current epoch cannot supply another full batch.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.k > self.order.len() {
            self.reshuffle();
        }
        let batch = &self.order[self.pos..self.pos + self.k];
        self.pos += self.k;
        batch
    }
}
