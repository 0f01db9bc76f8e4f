//! Localization and weakly-supervised segmentation metrics: box accuracy at
//! IoU >= 0.5 (with and without requiring the correct class), plain top-1
//! classification, and pixel precision/recall with the area under the
//! precision-recall curve swept over mask thresholds.

use thiserror::Error;

use crate::maskgeom::{iou, BoundingBox, WeightMap};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty record set")]
    Empty,
    #[error("no ground-truth foreground pixel in any mask")]
    NoForeground,
    #[error("threshold grid must be strictly increasing within [0,1]")]
    BadGrid,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Per-image evaluation record for the box metrics.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub image_id: String,
    pub pred_box: BoundingBox,
    pub pred_class: usize,
    pub gt_box: BoundingBox,
    pub gt_class: usize,
}

/// A weight map paired with its binary ground-truth mask, for the pixel
/// metrics. `truth` is row-major with the map's dimensions.
#[derive(Debug, Clone)]
pub struct PixelEval {
    pub map: WeightMap,
    pub truth: Vec<bool>,
}

const IOU_THRESHOLD: f64 = 0.5;

fn fraction(records: &[EvalRecord], pred: impl Fn(&EvalRecord) -> bool) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = records.iter().filter(|r| pred(r)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of records whose predicted box reaches IoU >= 0.5 with the
/// ground truth, regardless of the predicted class.
pub fn gt_known_loc(records: &[EvalRecord]) -> Result<f64> {
    fraction(records, |r| iou(&r.pred_box, &r.gt_box) >= IOU_THRESHOLD)
}

/// Fraction with the correct class AND IoU >= 0.5.
pub fn top1_loc(records: &[EvalRecord]) -> Result<f64> {
    fraction(records, |r| {
        r.pred_class == r.gt_class && iou(&r.pred_box, &r.gt_box) >= IOU_THRESHOLD
    })
}

/// Fraction with the correct class.
pub fn top1_cls(records: &[EvalRecord]) -> Result<f64> {
    fraction(records, |r| r.pred_class == r.gt_class)
}

fn pooled_counts(data: &[PixelEval], sigma: f64) -> (usize, usize, usize) {
    let mut selected = 0usize;
    let mut hits = 0usize;
    let mut foreground = 0usize;
    for pe in data {
        for (v, t) in pe.map.values().iter().zip(pe.truth.iter()) {
            let sel = *v >= sigma;
            selected += sel as usize;
            hits += (sel && *t) as usize;
            foreground += *t as usize;
        }
    }
    (selected, hits, foreground)
}

/// Pixel precision and recall at threshold `sigma`, counts pooled over all
/// images. Precision of an empty selection is 1 by convention so the curve
/// stays total.
pub fn px_prec_rec(data: &[PixelEval], sigma: f64) -> Result<(f64, f64)> {
    let (selected, hits, foreground) = pooled_counts(data, sigma);
    if foreground == 0 {
        return Err(MetricError::NoForeground);
    }
    let prec = if selected == 0 { 1.0 } else { hits as f64 / selected as f64 };
    let rec = hits as f64 / foreground as f64;
    Ok((prec, rec))
}

/// How the precision-recall area is accumulated; see [`px_ap_with_mode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PxApMode {
    /// Area under the precision-recall curve: each drop in recall between
    /// consecutive thresholds is weighted by the precision at the lower
    /// threshold (the last one at which those pixels were still selected),
    /// with recall taken to 0 past the end of the grid.
    Standard,
    /// Literal `sum_l prec(s_l) * (rec(s_l) - prec(s_{l-1}))`, summed from
    /// the second grid point. Kept for comparison only; it mixes precision
    /// into the recall increment and is not an area.
    Printed,
}

/// Evenly spaced thresholds 0.00..=1.00.
pub fn default_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2);
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}

/// Strictly increasing unique order statistics of the pooled map values,
/// at most `points` of them. Thresholding at data quantiles makes the area
/// invariant under strictly monotone rescaling of the maps.
pub fn quantile_grid(data: &[PixelEval], points: usize) -> Vec<f64> {
    let mut values: Vec<f64> = data.iter().flat_map(|pe| pe.map.values().iter().copied()).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let mut grid: Vec<f64> = (0..points)
        .map(|i| values[(i * (n - 1)) / (points - 1).max(1)])
        .collect();
    grid.dedup();
    grid
}

pub fn px_ap(data: &[PixelEval], grid: &[f64]) -> Result<f64> {
    px_ap_with_mode(data, grid, PxApMode::Standard)
}

pub fn px_ap_with_mode(data: &[PixelEval], grid: &[f64], mode: PxApMode) -> Result<f64> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricError::BadGrid);
    }
    if !grid.iter().all(|s| (0.0..=1.0).contains(s)) {
        return Err(MetricError::BadGrid);
    }
    let curve: Vec<(f64, f64)> =
        grid.iter().map(|&s| px_prec_rec(data, s)).collect::<Result<_>>()?;
    let ap = match mode {
        PxApMode::Standard => {
            let mut acc = 0.0;
            for l in 0..curve.len() {
                let (prec, rec) = curve[l];
                let rec_next = if l + 1 < curve.len() { curve[l + 1].1 } else { 0.0 };
                acc += prec * (rec - rec_next);
            }
            acc
        }
        PxApMode::Printed => {
            let mut acc = 0.0;
            for l in 1..curve.len() {
                let (prec, rec) = curve[l];
                acc += prec * (rec - curve[l - 1].0);
            }
            acc
        }
    };
    Ok(ap)
}

/// The full precision-recall curve over a grid, for reporting.
pub fn pr_curve(data: &[PixelEval], grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut precs = Vec::with_capacity(grid.len());
    let mut recs = Vec::with_capacity(grid.len());
    for &s in grid {
        let (p, r) = px_prec_rec(data, s)?;
        precs.push(p);
        recs.push(r);
    }
    Ok((precs, recs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(pred: BoundingBox, pc: usize, gt: BoundingBox, gc: usize) -> EvalRecord {
        EvalRecord {
            image_id: "t".into(),
            pred_box: pred,
            pred_class: pc,
            gt_box: gt,
            gt_class: gc,
        }
    }

    fn bb(x1: usize, y1: usize, x2: usize, y2: usize) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    #[test]
    fn box_metric_basics() {
        let a = bb(0, 0, 10, 10);
        let far = bb(20, 20, 30, 30);
        let perfect = vec![rec(a, 0, a, 0), rec(far, 1, far, 1)];
        assert_eq!(gt_known_loc(&perfect).unwrap(), 1.0);
        assert_eq!(top1_loc(&perfect).unwrap(), 1.0);
        assert_eq!(top1_cls(&perfect).unwrap(), 1.0);

        let wrong_class = vec![rec(a, 1, a, 0), rec(far, 0, far, 1)];
        assert_eq!(gt_known_loc(&wrong_class).unwrap(), 1.0);
        assert_eq!(top1_loc(&wrong_class).unwrap(), 0.0);

        let disjoint = vec![rec(a, 0, far, 0)];
        assert_eq!(gt_known_loc(&disjoint).unwrap(), 0.0);

        assert_eq!(gt_known_loc(&[]).unwrap_err(), MetricError::Empty);
    }

    #[test]
    fn gt_known_counts_iou_above_half() {
        // IoU 0.6: 10x6 overlap of two 10x... construct: [0,10)x[0,10) vs [0,10)x[2,10) iou 8/12=0.667
        let a = rec(bb(0, 0, 10, 10), 0, bb(0, 2, 10, 10), 0);
        // IoU 25/175 ~ 0.143
        let b = rec(bb(0, 0, 10, 10), 0, bb(5, 5, 15, 15), 0);
        let two = vec![a, b];
        assert_eq!(gt_known_loc(&two).unwrap(), 0.5);
    }

    #[test]
    fn three_of_four_classified() {
        let a = bb(0, 0, 4, 4);
        let rs = vec![rec(a, 0, a, 0), rec(a, 1, a, 1), rec(a, 2, a, 2), rec(a, 0, a, 3)];
        assert_eq!(top1_cls(&rs).unwrap(), 0.75);
    }

    fn uniform_map_30pct(h: usize, w: usize, level: f64) -> PixelEval {
        let n = h * w;
        let fg = (n * 3) / 10;
        PixelEval {
            map: WeightMap::new(h, w, vec![level; n]).unwrap(),
            truth: (0..n).map(|i| i < fg).collect(),
        }
    }

    #[test]
    fn prec_rec_uniform_half_map() {
        let data = vec![uniform_map_30pct(10, 10, 0.5)];
        let (p, r) = px_prec_rec(&data, 0.4).unwrap();
        assert!((p - 0.3).abs() < 1e-12);
        assert_eq!(r, 1.0);
        let (_, r0) = px_prec_rec(&data, 0.0).unwrap();
        assert_eq!(r0, 1.0, "threshold 0 selects everything");
        let (p_hi, r_hi) = px_prec_rec(&data, 0.9).unwrap();
        assert_eq!((p_hi, r_hi), (1.0, 0.0), "empty selection: precision 1 by convention");
    }

    #[test]
    fn perfect_binary_predictor_prec_rec() {
        let truth: Vec<bool> = (0..100).map(|i| i % 7 == 0).collect();
        let map =
            WeightMap::new(10, 10, truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect())
                .unwrap();
        let data = vec![PixelEval { map, truth }];
        let (p, r) = px_prec_rec(&data, 0.5).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
        assert_eq!(px_ap(&data, &default_grid(101)).unwrap(), 1.0);
    }

    #[test]
    fn no_foreground_is_an_error() {
        let data = vec![PixelEval {
            map: WeightMap::new(2, 2, vec![0.5; 4]).unwrap(),
            truth: vec![false; 4],
        }];
        assert_eq!(px_prec_rec(&data, 0.5).unwrap_err(), MetricError::NoForeground);
        assert_eq!(px_ap(&data, &default_grid(11)).unwrap_err(), MetricError::NoForeground);
    }

    #[test]
    fn uniform_map_ap_is_foreground_fraction() {
        // single recall drop from 1 to 0 at precision 0.3
        let data = vec![uniform_map_30pct(20, 20, 0.5)];
        let ap = px_ap(&data, &default_grid(101)).unwrap();
        assert!((ap - 0.3).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn bad_grids_are_rejected() {
        let data = vec![uniform_map_30pct(4, 4, 0.5)];
        assert_eq!(px_ap(&data, &[]).unwrap_err(), MetricError::BadGrid);
        assert_eq!(px_ap(&data, &[0.5, 0.5]).unwrap_err(), MetricError::BadGrid);
        assert_eq!(px_ap(&data, &[0.2, 1.5]).unwrap_err(), MetricError::BadGrid);
    }

    #[test]
    fn printed_mode_differs_from_standard() {
        let data = vec![uniform_map_30pct(10, 10, 0.5)];
        let std = px_ap_with_mode(&data, &default_grid(101), PxApMode::Standard).unwrap();
        let printed = px_ap_with_mode(&data, &default_grid(101), PxApMode::Printed).unwrap();
        assert!((std - printed).abs() > 1e-6);
    }

    #[test]
    fn quantile_grid_monotone_rescale_invariance() {
        let h = 8;
        let mut values: Vec<f64> = (0..h * h).map(|i| ((i * 53 % 97) as f64) / 96.0).collect();
        values[5] = 0.0;
        let truth: Vec<bool> = (0..h * h).map(|i| i % 3 == 0).collect();
        let data = vec![PixelEval {
            map: WeightMap::new(h, h, values.clone()).unwrap(),
            truth: truth.clone(),
        }];
        // strictly monotone rescale: x -> x^2 stays within [0,1]
        let rescaled = vec![PixelEval {
            map: WeightMap::new(h, h, values.iter().map(|v| v * v).collect()).unwrap(),
            truth,
        }];
        let g1 = quantile_grid(&data, 32);
        let g2 = quantile_grid(&rescaled, 32);
        let a1 = px_ap(&data, &g1).unwrap();
        let a2 = px_ap(&rescaled, &g2).unwrap();
        assert!((a1 - a2).abs() < 1e-12, "{a1} vs {a2}");
    }

    proptest! {
        #[test]
        fn conjunction_bound_holds(seed in 0u64..1000) {
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 33) as usize };
            let records: Vec<EvalRecord> = (0..20).map(|_| {
                let x1 = next() % 16; let y1 = next() % 16;
                let gx1 = next() % 16; let gy1 = next() % 16;
                rec(
                    bb(x1, y1, x1 + 1 + next() % 10, y1 + 1 + next() % 10),
                    next() % 3,
                    bb(gx1, gy1, gx1 + 1 + next() % 10, gy1 + 1 + next() % 10),
                    next() % 3,
                )
            }).collect();
            let t1l = top1_loc(&records).unwrap();
            prop_assert!(t1l <= gt_known_loc(&records).unwrap() + 1e-12);
            prop_assert!(t1l <= top1_cls(&records).unwrap() + 1e-12);
        }

        #[test]
        fn recall_is_non_increasing_in_sigma(seed in 0u64..200) {
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); ((s >> 11) as f64 / (1u64 << 53) as f64) };
            let values: Vec<f64> = (0..64).map(|_| next()).collect();
            let truth: Vec<bool> = (0..64).map(|_| next() > 0.5).collect();
            prop_assume!(truth.iter().any(|&t| t));
            let data = vec![PixelEval { map: WeightMap::new(8, 8, values).unwrap(), truth }];
            let grid = default_grid(21);
            let (_, recs) = pr_curve(&data, &grid).unwrap();
            for w in recs.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let ap = px_ap(&data, &grid).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }
}
