//! From weight map to bounding box: max-relative thresholding, border
//! following over 8-connected foreground components, largest-contour
//! selection, and axis-aligned box algebra.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeomError {
    #[error("weight map is identically zero")]
    DegenerateMask,
    #[error("no contour to select")]
    NoContour,
    #[error("invalid weight map: {0}")]
    BadMap(String),
}

pub type Result<T> = std::result::Result<T, GeomError>;

/// H x W map of weights in [0,1], row-major.
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub h: usize,
    pub w: usize,
    values: Vec<f64>,
}

impl WeightMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<WeightMap> {
        if values.len() != h * w {
            return Err(GeomError::BadMap(format!(
                "{}x{} map needs {} values, got {}",
                h,
                w,
                h * w,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GeomError::BadMap(format!("value {v} outside [0,1]")));
        }
        Ok(WeightMap { h, w, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// A weight map with every value below the threshold zeroed; surviving
/// entries keep their weights (they feed the mass-in-box score).
#[derive(Debug, Clone)]
pub struct ThresholdedMap {
    pub h: usize,
    pub w: usize,
    values: Vec<f64>,
}

impl ThresholdedMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    fn foreground(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }
}

/// Ordered outer-boundary walk of one 8-connected foreground component.
/// `area` is the component's pixel count; `start` is its top-most then
/// left-most pixel, which is also `points[0]`.
#[derive(Debug, Clone)]
pub struct Contour {
    pub points: Vec<(usize, usize)>,
    pub area: usize,
    pub start: (usize, usize),
}

/// Half-open pixel rectangle: [x1, x2) horizontally, [y1, y2) vertically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn full_image(h: usize, w: usize) -> BoundingBox {
        BoundingBox { x1: 0, y1: 0, x2: w, y2: h }
    }

    pub fn is_valid(&self, h: usize, w: usize) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x2 <= w && self.y2 <= h
    }
}

/// `tau = max(M) / 10`; an all-zero map has no meaningful threshold.
pub fn compute_threshold(map: &WeightMap) -> Result<f64> {
    let m = map.max();
    if m == 0.0 {
        return Err(GeomError::DegenerateMask);
    }
    Ok(m / 10.0)
}

/// Zero everything strictly below `tau`, keep surviving weights as-is.
pub fn binarize(map: &WeightMap, tau: f64) -> ThresholdedMap {
    ThresholdedMap {
        h: map.h,
        w: map.w,
        values: map.values.iter().map(|&v| if v >= tau { v } else { 0.0 }).collect(),
    }
}

// Clockwise 8-neighborhood starting west, in (row, col) offsets.
const NEIGHBORS: [(isize, isize); 8] =
    [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

/// One outer contour per 8-connected foreground component, ordered by the
/// (top-most, left-most) starting pixel. Border following walks the Moore
/// neighborhood clockwise; interior holes are ignored.
pub fn trace_contours(map: &ThresholdedMap) -> Vec<Contour> {
    let (h, w) = (map.h, map.w);
    let fg = map.foreground();
    let mut labeled = vec![false; h * w];
    let mut contours = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            if !fg[idx] || labeled[idx] {
                continue;
            }
            // flood fill the component for its area and to mark it visited
            let mut area = 0usize;
            let mut stack = vec![(row, col)];
            labeled[idx] = true;
            while let Some((r, c)) = stack.pop() {
                area += 1;
                for (dr, dc) in NEIGHBORS {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if fg[nidx] && !labeled[nidx] {
                        labeled[nidx] = true;
                        stack.push((nr as usize, nc as usize));
                    }
                }
            }
            let points = walk_boundary(&fg, h, w, (row, col));
            contours.push(Contour { points, area, start: (row, col) });
        }
    }
    contours
}

/// Moore-neighbor boundary walk from the component's scan-order first pixel
/// (its west and north neighbors are background by construction). The walk
/// state is (pixel, backtrack direction); it stops when a state repeats,
/// which covers thin components whose orbit never revisits the initial
/// backtrack.
fn walk_boundary(fg: &[bool], h: usize, w: usize, start: (usize, usize)) -> Vec<(usize, usize)> {
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && r < h as isize && c >= 0 && c < w as isize && fg[r as usize * w + c as usize]
    };
    let mut points = vec![start];
    // backtrack starts at the west neighbor (background)
    let mut p = (start.0 as isize, start.1 as isize);
    let mut back_dir = 0usize;
    let mut seen = std::collections::HashSet::new();
    seen.insert((p, back_dir));
    loop {
        let mut found = None;
        for step in 1..=8usize {
            let dir = (back_dir + step) % 8;
            let (dr, dc) = NEIGHBORS[dir];
            if at(p.0 + dr, p.1 + dc) {
                found = Some((dir, step));
                break;
            }
        }
        let Some((dir, step)) = found else {
            return points; // isolated pixel
        };
        let prev_bg = (back_dir + step - 1) % 8;
        let (dr, dc) = NEIGHBORS[dir];
        p = (p.0 + dr, p.1 + dc);
        // the new backtrack is the previous background neighbor, expressed
        // relative to the new current pixel; ring-consecutive neighbors are
        // 8-adjacent, so the lookup always succeeds
        let bg_abs = (
            p.0 - dr + NEIGHBORS[prev_bg].0,
            p.1 - dc + NEIGHBORS[prev_bg].1,
        );
        back_dir = NEIGHBORS
            .iter()
            .position(|&(r, c)| (p.0 + r, p.1 + c) == bg_abs)
            .expect("backtrack is 8-adjacent to the new pixel");
        if !seen.insert((p, back_dir)) {
            return points;
        }
        points.push((p.0 as usize, p.1 as usize));
    }
}

/// Largest-area contour; ties break toward the smaller (row, col) start.
pub fn largest_contour(contours: &[Contour]) -> Result<&Contour> {
    contours
        .iter()
        .max_by(|a, b| a.area.cmp(&b.area).then_with(|| b.start.cmp(&a.start)))
        .ok_or(GeomError::NoContour)
}

/// Tightest half-open box containing every boundary point.
pub fn contour_box(contour: &Contour) -> BoundingBox {
    let mut x1 = usize::MAX;
    let mut y1 = usize::MAX;
    let mut x2 = 0usize;
    let mut y2 = 0usize;
    for &(r, c) in &contour.points {
        x1 = x1.min(c);
        y1 = y1.min(r);
        x2 = x2.max(c + 1);
        y2 = y2.max(r + 1);
    }
    BoundingBox { x1, y1, x2, y2 }
}

/// Intersection over union of half-open boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1));
    let iy = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// End-to-end box extraction from a weight map.
#[derive(Debug, Clone)]
pub struct BoxExtraction {
    pub bbox: BoundingBox,
    pub thresholded: ThresholdedMap,
    /// Set when the map was identically zero and the full-image fallback
    /// box was used.
    pub degenerate: bool,
}

/// threshold -> binarize -> trace -> largest -> box. An all-zero map yields
/// the full-image box with `degenerate` set.
pub fn extract_box(map: &WeightMap) -> BoxExtraction {
    match compute_threshold(map) {
        Err(GeomError::DegenerateMask) => BoxExtraction {
            bbox: BoundingBox::full_image(map.h, map.w),
            thresholded: binarize(map, f64::INFINITY),
            degenerate: true,
        },
        Err(_) => unreachable!("compute_threshold only fails on degenerate masks"),
        Ok(tau) => {
            let thresholded = binarize(map, tau);
            let contours = trace_contours(&thresholded);
            let largest = largest_contour(&contours)
                .expect("threshold = max/10 keeps at least the max pixel");
            let bbox = contour_box(largest);
            BoxExtraction { bbox, thresholded, degenerate: false }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_from(h: usize, w: usize, fill: impl Fn(usize, usize) -> f64) -> WeightMap {
        let mut values = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                values[r * w + c] = fill(r, c);
            }
        }
        WeightMap::new(h, w, values).unwrap()
    }

    #[test]
    fn threshold_is_tenth_of_max() {
        let m = map_from(2, 2, |r, c| if (r, c) == (0, 1) { 0.9 } else { 0.1 });
        assert_eq!(compute_threshold(&m).unwrap(), 0.09);
        let m = map_from(2, 2, |r, c| if (r, c) == (1, 0) { 1.0 } else { 0.0 });
        assert_eq!(compute_threshold(&m).unwrap(), 0.1);
        let zero = map_from(2, 2, |_, _| 0.0);
        assert_eq!(compute_threshold(&zero).unwrap_err(), GeomError::DegenerateMask);
    }

    #[test]
    fn binarize_keeps_weights_above_threshold() {
        let m = WeightMap::new(1, 3, vec![0.05, 0.2, 0.9]).unwrap();
        let b = binarize(&m, 0.09);
        assert_eq!(b.values(), &[0.0, 0.2, 0.9]);
        let all_zero = binarize(&m, 0.95);
        assert!(all_zero.values().iter().all(|&v| v == 0.0));
        let unchanged = binarize(&m, 0.05);
        assert_eq!(unchanged.values(), m.values());
    }

    #[test]
    fn empty_map_has_no_contours() {
        let m = map_from(64, 64, |_, _| 0.0);
        assert!(trace_contours(&binarize(&m, 0.5)).is_empty());
    }

    #[test]
    fn filled_square_is_one_contour_with_pixel_area() {
        let m = map_from(32, 32, |r, c| {
            if (10..15).contains(&r) && (10..15).contains(&c) {
                0.8
            } else {
                0.0
            }
        });
        let contours = trace_contours(&binarize(&m, 0.08));
        assert_eq!(contours.len(), 1);
        assert_eq!(contours[0].area, 25);
        assert_eq!(contours[0].start, (10, 10));
        let bb = contour_box(&contours[0]);
        assert_eq!(bb, BoundingBox { x1: 10, y1: 10, x2: 15, y2: 15 });
        // every boundary point is foreground and consecutive points are 8-adjacent
        for win in contours[0].points.windows(2) {
            let (a, b) = (win[0], win[1]);
            assert!(a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1);
        }
    }

    #[test]
    fn two_squares_yield_two_areas() {
        let m = map_from(32, 32, |r, c| {
            let small = (2..5).contains(&r) && (2..5).contains(&c);
            let big = (10..15).contains(&r) && (20..25).contains(&c);
            if small || big {
                1.0
            } else {
                0.0
            }
        });
        let contours = trace_contours(&binarize(&m, 0.1));
        let mut areas: Vec<usize> = contours.iter().map(|c| c.area).collect();
        areas.sort_unstable();
        assert_eq!(areas, vec![9, 25]);
        let largest = largest_contour(&contours).unwrap();
        assert_eq!(largest.area, 25);
    }

    #[test]
    fn largest_contour_tie_breaks_on_start() {
        let mk = |start: (usize, usize)| Contour {
            points: vec![start],
            area: 4,
            start,
        };
        let contours = vec![mk((5, 1)), mk((2, 3))];
        assert_eq!(largest_contour(&contours).unwrap().start, (2, 3));
        assert!(largest_contour(&[]).is_err());
    }

    #[test]
    fn single_pixel_box() {
        let c = Contour { points: vec![(3, 7)], area: 1, start: (3, 7) };
        assert_eq!(contour_box(&c), BoundingBox { x1: 7, y1: 3, x2: 8, y2: 4 });
    }

    #[test]
    fn l_shape_box_spans_component() {
        // L over rows 0..10 in col 0..2 plus rows 8..10 cols 0..5
        let m = map_from(16, 16, |r, c| {
            if (r < 10 && c < 2) || ((8..10).contains(&r) && c < 5) {
                0.6
            } else {
                0.0
            }
        });
        let contours = trace_contours(&binarize(&m, 0.06));
        assert_eq!(contours.len(), 1);
        let bb = contour_box(&contours[0]);
        assert_eq!(bb, BoundingBox { x1: 0, y1: 0, x2: 5, y2: 10 });
    }

    #[test]
    fn iou_cases() {
        let a = BoundingBox { x1: 0, y1: 0, x2: 10, y2: 10 };
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = BoundingBox { x1: 20, y1: 20, x2: 30, y2: 30 };
        assert_eq!(iou(&a, &disjoint), 0.0);
        let b = BoundingBox { x1: 5, y1: 5, x2: 15, y2: 15 };
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn extract_box_gaussian_blob_support() {
        let (cy, cx, peak) = (20.0, 28.0, 0.8);
        let m = map_from(64, 64, |r, c| {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            peak * (-d2 / 50.0).exp()
        });
        let ext = extract_box(&m);
        assert!(!ext.degenerate);
        // oracle: support of values >= peak/10, tight box
        let tau = peak / 10.0;
        let mut want = (usize::MAX, usize::MAX, 0usize, 0usize);
        for r in 0..64 {
            for c in 0..64 {
                if m.values()[r * 64 + c] >= tau {
                    want.0 = want.0.min(c);
                    want.1 = want.1.min(r);
                    want.2 = want.2.max(c + 1);
                    want.3 = want.3.max(r + 1);
                }
            }
        }
        assert_eq!((ext.bbox.x1, ext.bbox.y1, ext.bbox.x2, ext.bbox.y2), want);
    }

    #[test]
    fn extract_box_degenerate_and_uniform() {
        let zero = map_from(8, 8, |_, _| 0.0);
        let ext = extract_box(&zero);
        assert!(ext.degenerate);
        assert_eq!(ext.bbox, BoundingBox::full_image(8, 8));
        let uniform = map_from(8, 8, |_, _| 0.3);
        let ext = extract_box(&uniform);
        assert!(!ext.degenerate);
        assert_eq!(ext.bbox, BoundingBox::full_image(8, 8));
    }

    /// Brute-force oracle: flood-fill labeling (8-connected) over the
    /// support, then the tight box of the largest component's pixels.
    pub(crate) fn oracle_largest_component_box(fg: &[bool], h: usize, w: usize) -> Option<BoundingBox> {
        let mut seen = vec![false; h * w];
        let mut best: Option<(usize, (usize, usize), BoundingBox)> = None;
        for r in 0..h {
            for c in 0..w {
                if !fg[r * w + c] || seen[r * w + c] {
                    continue;
                }
                let mut stack = vec![(r, c)];
                seen[r * w + c] = true;
                let mut count = 0;
                let (mut x1, mut y1, mut x2, mut y2) = (c, r, c + 1, r + 1);
                while let Some((rr, cc)) = stack.pop() {
                    count += 1;
                    x1 = x1.min(cc);
                    y1 = y1.min(rr);
                    x2 = x2.max(cc + 1);
                    y2 = y2.max(rr + 1);
                    for dr in -1isize..=1 {
                        for dc in -1isize..=1 {
                            let (nr, nc) = (rr as isize + dr, cc as isize + dc);
                            if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
                                continue;
                            }
                            let ni = nr as usize * w + nc as usize;
                            if fg[ni] && !seen[ni] {
                                seen[ni] = true;
                                stack.push((nr as usize, nc as usize));
                            }
                        }
                    }
                }
                let bb = BoundingBox { x1, y1, x2, y2 };
                let better = match &best {
                    None => true,
                    Some((ba, bs, _)) => count > *ba || (count == *ba && (r, c) < *bs),
                };
                if better {
                    best = Some((count, (r, c), bb));
                }
            }
        }
        best.map(|(_, _, bb)| bb)
    }

    #[test]
    fn matches_flood_fill_oracle_on_random_maps() {
        let mut state = 0x12345678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        for round in 0..100 {
            let (h, w) = (24, 24);
            let density = 0.2 + 0.6 * ((round % 10) as f64 / 10.0);
            let fg: Vec<bool> = (0..h * w).map(|_| (next() as f64 / u32::MAX as f64) < density).collect();
            let values: Vec<f64> = fg.iter().map(|&b| if b { 0.5 } else { 0.0 }).collect();
            let map = WeightMap::new(h, w, values).unwrap();
            let ext = extract_box(&map);
            match oracle_largest_component_box(&fg, h, w) {
                Some(bb) => assert_eq!(ext.bbox, bb, "round {round}"),
                None => assert!(ext.degenerate, "round {round}"),
            }
        }
    }

    proptest! {
        #[test]
        fn iou_symmetry_and_identity(
            ax in 0usize..20, ay in 0usize..20, aw in 1usize..12, ah in 1usize..12,
            bx in 0usize..20, by in 0usize..20, bw in 1usize..12, bh in 1usize..12,
        ) {
            let a = BoundingBox { x1: ax, y1: ay, x2: ax + aw, y2: ay + ah };
            let b = BoundingBox { x1: bx, y1: by, x2: bx + bw, y2: by + bh };
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            // dilating one box so it contains the other never lowers overlap
            let dilated = BoundingBox {
                x1: a.x1.min(b.x1), y1: a.y1.min(b.y1),
                x2: a.x2.max(b.x2), y2: a.y2.max(b.y2),
            };
            prop_assert!(iou(&dilated, &b) >= iou(&a, &b) - 1e-12);
        }

        #[test]
        fn binarize_is_idempotent(values in proptest::collection::vec(0.0f64..=1.0, 16), tau in 0.01f64..0.9) {
            let m = WeightMap::new(4, 4, values).unwrap();
            let once = binarize(&m, tau);
            let twice = binarize(&WeightMap::new(4, 4, once.values().to_vec()).unwrap(), tau);
            prop_assert_eq!(once.values(), twice.values());
            for &v in once.values() {
                prop_assert!(v == 0.0 || v >= tau);
            }
        }

        #[test]
        fn contour_boxes_stay_in_bounds(values in proptest::collection::vec(0.0f64..=1.0, 64)) {
            let m = WeightMap::new(8, 8, values).unwrap();
            let ext = extract_box(&m);
            prop_assert!(ext.bbox.is_valid(8, 8));
        }
    }
}
