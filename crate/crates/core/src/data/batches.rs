use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded stream of shuffled mini-batches of sample indices.
///
/// Each call to [`BatchStream::epoch`] draws a fresh permutation and drops the
/// final short batch, so every batch holds exactly `batch_size` indices.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::OddBatch(batch_size));
        }
        Ok(BatchStream { n, batch_size, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    pub fn dropped_per_epoch(&self) -> usize {
        self.n % self.batch_size
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut self.rng);
        perm.chunks_exact(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Split a batch into its unlearning half (first `B/2`) and retaining half (last `B/2`).
pub fn split_batch<T>(batch: &[T]) -> Result<(&[T], &[T])> {
    if batch.len() % 2 != 0 {
        return Err(Error::OddBatch(batch.len()));
    }
    Ok(batch.split_at(batch.len() / 2))
}
