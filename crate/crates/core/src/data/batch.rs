use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Samples;

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffled batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short. Panics if `batch_size == 0`.
pub fn batches<S: Samples + ?Sized>(
    set: &S,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order = set.sample_indices().into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64 + 1));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Source, Split};

    fn dataset(n: usize) -> Dataset<f64> {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::from_bytes(&vec![0; n * 784], labels, Split::Train, Source::Mnist).unwrap()
    }

    #[test]
    fn deterministic_partition() {
        let d = dataset(23);
        let a = batches(&d, 5, 9, 0);
        assert_eq!(a, batches(&d, 5, 9, 0));
        assert_eq!(a.len(), 5);
        assert_eq!(a.last().unwrap().len(), 3);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_ne!(a, batches(&d, 5, 9, 1));
        assert_ne!(a, batches(&d, 5, 10, 0));
    }
}
