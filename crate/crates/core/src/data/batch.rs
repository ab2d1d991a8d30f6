use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Instance};

/// Index batches over `n` items. With a seed the order is a seeded
/// permutation; without one it is sequential. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Yields batches of instance references from all scenarios merged together.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Self {
        BatchIter {
            dataset,
            batches: batch_indices(dataset.len(), batch_size, shuffle_seed).into_iter(),
        }
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        self.batches
            .next()
            .map(|idx| idx.into_iter().map(|i| &self.dataset.instances[i]).collect())
    }
}
