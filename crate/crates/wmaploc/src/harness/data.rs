use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::synthdata::Sample;

/// Stack samples into a [B,3,H,W] tensor.
pub fn to_image_tensor(samples: &[&Sample]) -> Tensor {
    let (h, w) = (samples[0].h, samples[0].w);
    let mut values = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        debug_assert_eq!((s.h, s.w), (h, w));
        values.extend_from_slice(&s.image);
    }
    Tensor::new(&[samples.len(), 3, h, w], values).expect("consistent by construction")
}

/// One-hot labels as a [B,D] tensor.
pub fn to_one_hot(samples: &[&Sample], classes: usize) -> Tensor {
    let mut values = vec![0.0; samples.len() * classes];
    for (i, s) in samples.iter().enumerate() {
        values[i * classes + s.label] = 1.0;
    }
    Tensor::new(&[samples.len(), classes], values).expect("consistent by construction")
}

/// Shuffled index batches for one epoch. The final partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Within-batch triplet assignment: for each anchor, a uniformly drawn
/// same-class batch member (the anchor itself when it is the only one of
/// its class) and a uniformly drawn different-class member. Anchors with no
/// different-class member in the batch are skipped.
pub fn batch_triplets(
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize)> {
    let mut triples = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let positives: Vec<usize> =
            (0..labels.len()).filter(|&j| j != i && labels[j] == label).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != label).collect();
        if negatives.is_empty() {
            continue;
        }
        let p = if positives.is_empty() { i } else { positives[rng.gen_range(0..positives.len())] };
        let n = negatives[rng.gen_range(0..negatives.len())];
        triples.push((i, p, n));
    }
    triples
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = epoch_batches(10, 4, &mut rng);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 2);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn triplets_respect_labels() {
        let labels = vec![0, 0, 1, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let triples = batch_triplets(&labels, &mut rng);
        assert_eq!(triples.len(), 5);
        for (a, p, n) in triples {
            assert_eq!(labels[a], labels[p]);
            assert_ne!(labels[a], labels[n]);
            // index 4 is the only label-2 member: falls back to itself
            if a == 4 {
                assert_eq!(p, 4);
            } else {
                assert_ne!(a, p);
            }
        }
    }

    #[test]
    fn single_class_batch_yields_no_triples() {
        let labels = vec![1, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(batch_triplets(&labels, &mut rng).is_empty());
    }
}
