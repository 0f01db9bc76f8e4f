//! Early-stopping signal: the fraction of thresholded-map mass captured by
//! the extracted box, averaged over a validation set per epoch; the epoch
//! with the maximal average is the one to keep.

use thiserror::Error;

use crate::maskgeom::{BoundingBox, ThresholdedMap};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoppingError {
    #[error("no epoch scores to select from")]
    Empty,
}

/// Scores for one evaluation pass over the validation set.
#[derive(Debug, Clone)]
pub struct EpochScore {
    pub epoch: usize,
    pub mean_s: f64,
    pub per_image: Vec<f64>,
}

impl EpochScore {
    pub fn new(epoch: usize, per_image: Vec<f64>) -> EpochScore {
        let mean_s = if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().sum::<f64>() / per_image.len() as f64
        };
        EpochScore { epoch, mean_s, per_image }
    }
}

/// Mass of the thresholded map inside the box over its total mass.
/// A massless (degenerate) map scores 0.
pub fn s_score(mhat: &ThresholdedMap, bbox: &BoundingBox) -> f64 {
    let total = mhat.total_mass();
    if total <= 0.0 {
        return 0.0;
    }
    let values = mhat.values();
    let mut inside = 0.0;
    for y in bbox.y1..bbox.y2.min(mhat.h) {
        inside += values[y * mhat.w + bbox.x1..y * mhat.w + bbox.x2.min(mhat.w)]
            .iter()
            .sum::<f64>();
    }
    inside / total
}

/// Index into `scores` of the maximal mean score; ties go to the earlier
/// epoch.
pub fn select_checkpoint(scores: &[EpochScore]) -> Result<usize, StoppingError> {
    if scores.is_empty() {
        return Err(StoppingError::Empty);
    }
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.mean_s > scores[best].mean_s {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgeom::{binarize, WeightMap};
    use proptest::prelude::*;

    fn mhat(h: usize, w: usize, values: Vec<f64>) -> ThresholdedMap {
        binarize(&WeightMap::new(h, w, values).unwrap(), 1e-12)
    }

    #[test]
    fn all_mass_inside_box_scores_one() {
        let mut values = vec![0.0; 64];
        values[9] = 0.4; // (1,1)
        values[10] = 0.6; // (1,2)
        let m = mhat(8, 8, values);
        let bb = BoundingBox { x1: 1, y1: 1, x2: 3, y2: 2 };
        assert_eq!(s_score(&m, &bb), 1.0);
    }

    #[test]
    fn partial_mass_hand_summed() {
        // total 1.0, inside 0.8
        let mut values = vec![0.0; 16];
        values[5] = 0.5;
        values[6] = 0.3;
        values[15] = 0.2;
        let m = mhat(4, 4, values);
        let bb = BoundingBox { x1: 1, y1: 1, x2: 3, y2: 2 };
        assert!((s_score(&m, &bb) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_map_scores_zero() {
        let m = mhat(4, 4, vec![0.0; 16]);
        assert_eq!(s_score(&m, &BoundingBox::full_image(4, 4)), 0.0);
    }

    #[test]
    fn argmax_selection_and_tie_break() {
        let sc = |epoch, mean: f64| EpochScore { epoch, mean_s: mean, per_image: vec![] };
        assert_eq!(select_checkpoint(&[sc(0, 0.7), sc(1, 0.9), sc(2, 0.6)]).unwrap(), 1);
        assert_eq!(select_checkpoint(&[sc(0, 0.4)]).unwrap(), 0);
        assert_eq!(select_checkpoint(&[sc(0, 0.9), sc(1, 0.9)]).unwrap(), 0);
        assert_eq!(select_checkpoint(&[]).unwrap_err(), StoppingError::Empty);
    }

    #[test]
    fn selection_ignores_strictly_worse_tail() {
        let sc = |epoch, mean: f64| EpochScore { epoch, mean_s: mean, per_image: vec![] };
        let mut scores = vec![sc(0, 0.5), sc(1, 0.8)];
        let before = select_checkpoint(&scores).unwrap();
        scores.push(sc(2, 0.79));
        scores.push(sc(3, 0.1));
        assert_eq!(select_checkpoint(&scores).unwrap(), before);
    }

    #[test]
    fn epoch_score_mean_is_arithmetic_mean() {
        let e = EpochScore::new(3, vec![0.25, 0.75, 0.5]);
        assert!((e.mean_s - 0.5).abs() < 1e-15);
        assert_eq!(e.epoch, 3);
    }

    proptest! {
        #[test]
        fn scale_invariance(values in proptest::collection::vec(0.0f64..=1.0, 36), c in 0.01f64..1.0) {
            let m = mhat(6, 6, values.clone());
            let scaled = mhat(6, 6, values.iter().map(|v| v * c).collect());
            let bb = BoundingBox { x1: 1, y1: 2, x2: 5, y2: 6 };
            let (a, b) = (s_score(&m, &bb), s_score(&scaled, &bb));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn enlarging_the_box_never_decreases_s(
            values in proptest::collection::vec(0.0f64..=1.0, 36),
            x1 in 0usize..3, y1 in 0usize..3, dw in 1usize..4, dh in 1usize..4,
        ) {
            let m = mhat(6, 6, values);
            let small = BoundingBox { x1, y1, x2: x1 + dw, y2: y1 + dh };
            let big = BoundingBox { x1: 0, y1: 0, x2: (x1 + dw + 1).min(6), y2: (y1 + dh + 1).min(6) };
            prop_assert!(s_score(&m, &big) >= s_score(&m, &small) - 1e-12);
        }
    }
}
