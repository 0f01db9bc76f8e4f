//! Resize-crop-flip augmentation that keeps image, mask, and box
//! consistent. Training uses a random crop and a coin-flip horizontal
//! mirror; evaluation uses the deterministic center crop and no flip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    /// Side length after the initial resize.
    pub resize_to: usize,
    /// Side length of the crop taken from the resized image.
    pub crop: usize,
    /// Probability of a horizontal mirror in train mode.
    pub flip_prob: f64,
}

impl AugmentParams {
    /// Upscale by 9/8 then crop back to the original side, mirroring the
    /// resize-then-crop evaluation protocol at desk scale.
    pub fn for_size(size: usize) -> AugmentParams {
        AugmentParams { resize_to: size + size / 8, crop: size, flip_prob: 0.5 }
    }
}

/// Bilinear resize of a channel-major [3,H,W] image to a square side.
fn resize_image(image: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * side * side];
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for r in 0..side {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = y - y0 as f64;
        for c in 0..side {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = x - x0 as f64;
            for ch in 0..3 {
                let plane = &image[ch * h * w..(ch + 1) * h * w];
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out[(ch * side + r) * side + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Nearest-neighbor resize for the binary mask, same center mapping as the
/// bilinear path so geometry stays aligned.
fn resize_mask(mask: &[bool], h: usize, w: usize, side: usize) -> Vec<bool> {
    let mut out = vec![false; side * side];
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for r in 0..side {
        let y = (((r as f64 + 0.5) * sy - 0.5).round()).clamp(0.0, h as f64 - 1.0) as usize;
        for c in 0..side {
            let x = (((c as f64 + 0.5) * sx - 0.5).round()).clamp(0.0, w as f64 - 1.0) as usize;
            out[r * side + c] = mask[y * w + x];
        }
    }
    out
}

fn hflip_image(image: &mut [f64], side: usize) {
    for ch in 0..3 {
        for r in 0..side {
            let row = &mut image[(ch * side + r) * side..(ch * side + r + 1) * side];
            row.reverse();
        }
    }
}

fn hflip_mask(mask: &mut [bool], side: usize) {
    for r in 0..side {
        mask[r * side..(r + 1) * side].reverse();
    }
}

fn crop_image(image: &[f64], side: usize, oy: usize, ox: usize, crop: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * crop * crop];
    for ch in 0..3 {
        for r in 0..crop {
            let src = &image[(ch * side + oy + r) * side + ox..(ch * side + oy + r) * side + ox + crop];
            out[(ch * crop + r) * crop..(ch * crop + r + 1) * crop].copy_from_slice(src);
        }
    }
    out
}

fn crop_mask(mask: &[bool], side: usize, oy: usize, ox: usize, crop: usize) -> Vec<bool> {
    let mut out = vec![false; crop * crop];
    for r in 0..crop {
        out[r * crop..(r + 1) * crop]
            .copy_from_slice(&mask[(oy + r) * side + ox..(oy + r) * side + ox + crop]);
    }
    out
}

/// Default-protocol augmentation for the sample's own size.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng, mode: AugmentMode) -> Result<Sample> {
    augment_with(sample, rng, mode, AugmentParams::for_size(sample.h))
}

/// Augment with explicit geometry. The ground-truth box is recomputed from
/// the transformed mask, so mask and box stay consistent by construction.
/// A train-mode crop that would drop the whole object is resampled, with an
/// error after 10 attempts.
pub fn augment_with(
    sample: &Sample,
    rng: &mut ChaCha8Rng,
    mode: AugmentMode,
    params: AugmentParams,
) -> Result<Sample> {
    assert_eq!(sample.h, sample.w, "augmentation assumes square samples");
    let side = params.resize_to;
    let crop = params.crop;
    assert!(crop <= side, "crop {crop} larger than resized side {side}");
    let mut image = resize_image(&sample.image, sample.h, sample.w, side);
    let mut mask = resize_mask(&sample.gt_mask, sample.h, sample.w, side);
    let flip = match mode {
        AugmentMode::Train => rng.gen_bool(params.flip_prob),
        AugmentMode::Eval => false,
    };
    if flip {
        hflip_image(&mut image, side);
        hflip_mask(&mut mask, side);
    }
    let max_off = side - crop;
    let attempts = if mode == AugmentMode::Train { 10 } else { 1 };
    for attempt in 0..attempts {
        let (oy, ox) = match mode {
            AugmentMode::Train => (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off)),
            AugmentMode::Eval => (max_off / 2, max_off / 2),
        };
        let cropped_mask = crop_mask(&mask, side, oy, ox, crop);
        if let Some(gt_box) = Sample::mask_tight_box(&cropped_mask, crop, crop) {
            let cropped = crop_image(&image, side, oy, ox, crop);
            return Ok(Sample {
                id: sample.id.clone(),
                image: cropped,
                h: crop,
                w: crop,
                label: sample.label,
                gt_box,
                gt_mask: cropped_mask,
            });
        }
        if attempt + 1 == attempts {
            break;
        }
    }
    Err(DataError::CannotFit(format!(
        "crop of {} dropped the entire object after {attempts} attempts",
        sample.id
    )))
}
