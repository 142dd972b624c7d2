use rand::seq::SliceRandom;

use crate::rng::{self, streams};

/// Seeded permutation of `0..n` for one epoch, split into consecutive chunks of `batch_size`.
///
/// The last chunk holds the remainder and is kept.
pub fn shuffle_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(n >= 1 && batch_size >= 1, "need n >= 1 and batch_size >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream(seed, streams::SHUFFLE_BASE + epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_cover() {
        let batches = shuffle_batches(5, 2, 3, 0);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn deterministic_per_epoch() {
        assert_eq!(shuffle_batches(40, 7, 1, 2), shuffle_batches(40, 7, 1, 2));
        let e0 = shuffle_batches(16, 16, 1, 0);
        let e1 = shuffle_batches(16, 16, 1, 1);
        assert_ne!(e0, e1);
        let identity: Vec<usize> = (0..16).collect();
        assert_ne!(e0[0], identity);
        assert_ne!(e1[0], identity);
    }
}
