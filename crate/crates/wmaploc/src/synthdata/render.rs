//! Per-sample rendering: background texture, object blob, discriminative
//! patch. Everything derives from one per-sample seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DataError, DatasetSpec, Result, Sample, Split};

/// Where the class patch ended up; consumed by in-crate tests that certify
/// the class signal is local to the patch.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct PartGeometry {
    pub center: (f64, f64),
    pub radius: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Low-frequency desaturated noise: a coarse random grid upsampled with
/// bilinear interpolation plus faint per-pixel jitter.
fn render_background(rng: &mut ChaCha8Rng, size: usize, image: &mut [f64]) {
    const CELLS: usize = 6;
    let mut grid = [[0.0f64; 3]; CELLS * CELLS];
    for cell in grid.iter_mut() {
        let base: f64 = rng.gen_range(0.30..0.70);
        for ch in cell.iter_mut() {
            *ch = (base + rng.gen_range(-0.04..0.04f64)).clamp(0.0, 1.0);
        }
    }
    let scale = CELLS as f64 / size as f64;
    for r in 0..size {
        for c in 0..size {
            let y = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, CELLS as f64 - 1.0);
            let x = ((c as f64 + 0.5) * scale - 0.5).clamp(0.0, CELLS as f64 - 1.0);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(CELLS - 1), (x0 + 1).min(CELLS - 1));
            let (ty, tx) = (y - y0 as f64, x - x0 as f64);
            for ch in 0..3 {
                let top = grid[y0 * CELLS + x0][ch] * (1.0 - tx) + grid[y0 * CELLS + x1][ch] * tx;
                let bot = grid[y1 * CELLS + x0][ch] * (1.0 - tx) + grid[y1 * CELLS + x1][ch] * tx;
                image[(ch * size + r) * size + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02f64)).clamp(0.0, 1.0);
    }
}

struct Blob {
    mask: Vec<bool>,
    center: (f64, f64),
    max_radius: f64,
    area: usize,
}

/// Star-convex blob: base radius modulated by low-order harmonics, placed
/// with enough margin that augmentation crops cannot drop it.
fn render_blob(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Result<Blob> {
    let size = spec.image_size;
    let r_base = size as f64 * rng.gen_range(spec.object_scale.0..=spec.object_scale.1);
    let mut amps = [0.0f64; 3];
    let mut phases = [0.0f64; 3];
    for k in 0..3 {
        amps[k] = rng.gen_range(-0.12..0.12f64);
        phases[k] = rng.gen_range(0.0..std::f64::consts::TAU);
    }
    let max_radius = r_base * (1.0 + amps.iter().map(|a| a.abs()).sum::<f64>());
    let margin = max_radius + 2.0;
    if 2.0 * margin >= size as f64 {
        return Err(DataError::CannotFit(format!(
            "blob radius {max_radius:.1} px cannot fit a {size}x{size} image"
        )));
    }
    let cy = rng.gen_range(margin..size as f64 - margin);
    let cx = rng.gen_range(margin..size as f64 - margin);
    let mut mask = vec![false; size * size];
    let mut area = 0usize;
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let rho = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let mut radius = r_base;
            for k in 0..3 {
                radius += r_base * amps[k] * ((k as f64 + 2.0) * theta + phases[k]).cos();
            }
            if rho <= radius {
                mask[r * size + c] = true;
                area += 1;
            }
        }
    }
    Ok(Blob { mask, center: (cy, cx), max_radius, area })
}

/// Saturated body color with a directional shade ramp; class-independent.
fn paint_body(rng: &mut ChaCha8Rng, size: usize, blob: &Blob, image: &mut [f64]) {
    let hue: f64 = rng.gen_range(0.0..1.0);
    let sat: f64 = rng.gen_range(0.35..0.60);
    let val: f64 = rng.gen_range(0.45..0.75);
    let rgb = hsv_to_rgb(hue, sat, val);
    let psi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = (psi.cos(), psi.sin());
    for r in 0..size {
        for c in 0..size {
            if !blob.mask[r * size + c] {
                continue;
            }
            let proj = ((r as f64 - blob.center.0) * dir.0 + (c as f64 - blob.center.1) * dir.1)
                / blob.max_radius;
            let shade = 1.0 + 0.15 * proj;
            for ch in 0..3 {
                image[(ch * size + r) * size + c] = (rgb[ch] * shade).clamp(0.0, 1.0);
            }
        }
    }
}

/// The class patch: a small disk with the class hue and a checker texture,
/// placed uniformly among object pixels that keep the disk inside the
/// object.
fn paint_patch(
    rng: &mut ChaCha8Rng,
    spec: &DatasetSpec,
    class: usize,
    blob: &Blob,
    image: &mut [f64],
) -> Result<PartGeometry> {
    let size = spec.image_size;
    let target_area = spec.part_fraction * blob.area as f64;
    let radius = (target_area / std::f64::consts::PI).sqrt().max(1.5);
    let reach = radius + 0.5;
    let disk_fits = |r: usize, c: usize| -> bool {
        let lo_r = (r as f64 - reach).floor() as isize;
        let hi_r = (r as f64 + reach).ceil() as isize;
        let lo_c = (c as f64 - reach).floor() as isize;
        let hi_c = (c as f64 + reach).ceil() as isize;
        for rr in lo_r..=hi_r {
            for cc in lo_c..=hi_c {
                let d2 = (rr as f64 - r as f64).powi(2) + (cc as f64 - c as f64).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                if rr < 0
                    || rr >= size as isize
                    || cc < 0
                    || cc >= size as isize
                    || !blob.mask[rr as usize * size + cc as usize]
                {
                    return false;
                }
            }
        }
        true
    };
    let mut interior = Vec::new();
    for r in 0..size {
        for c in 0..size {
            if blob.mask[r * size + c] && disk_fits(r, c) {
                interior.push((r, c));
            }
        }
    }
    if interior.is_empty() {
        return Err(DataError::CannotFit(format!(
            "object of {} px cannot host a patch of radius {radius:.1} px",
            blob.area
        )));
    }
    let (pr, pc) = interior[rng.gen_range(0..interior.len())];
    let hue = class as f64 / spec.classes as f64;
    let bright = hsv_to_rgb(hue, 0.95, 0.95);
    let dark = hsv_to_rgb(hue, 0.95, 0.50);
    for r in 0..size {
        for c in 0..size {
            let d2 = (r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2);
            if d2 > radius * radius {
                continue;
            }
            let rgb = if (r + c) % 2 == 0 { bright } else { dark };
            for ch in 0..3 {
                image[(ch * size + r) * size + c] = rgb[ch];
            }
        }
    }
    Ok(PartGeometry { center: (pr as f64, pc as f64), radius })
}

pub(crate) fn render_sample(
    spec: &DatasetSpec,
    split: Split,
    class: usize,
    idx: usize,
) -> Result<(Sample, PartGeometry)> {
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    let seed = derive_seed(spec.seed, &[split_tag, class as u64, idx as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let mut image = vec![0.0; 3 * size * size];
    render_background(&mut rng, size, &mut image);
    let blob = render_blob(&mut rng, spec)?;
    paint_body(&mut rng, size, &blob, &mut image);
    let part = paint_patch(&mut rng, spec, class, &blob, &mut image)?;
    let gt_box = Sample::mask_tight_box(&blob.mask, size, size)
        .expect("blob mask is nonempty by construction");
    debug_assert!(gt_box.is_valid(size, size));
    Ok((
        Sample {
            id: super::sample_id(split, class, idx),
            image,
            h: size,
            w: size,
            label: class,
            gt_box,
            gt_mask: blob.mask,
        },
        part,
    ))
}

