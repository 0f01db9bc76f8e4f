//! Deterministic synthetic fine-grained dataset.
//!
//! Every image is a low-frequency noise background plus one smooth random
//! blob; classes share the blob shape family and body-color distribution,
//! and differ only in a small colored patch placed on the object. The
//! discriminative signal is therefore strictly local, which is what drives a
//! weight-map generator to over-localize late in training. Ground truth
//! (full-object mask and its tight box) is produced alongside each image.

mod augment;
mod render;

pub use augment::{augment, augment_with, AugmentMode, AugmentParams};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imgio;
use crate::maskgeom::BoundingBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("object cannot fit: {0}")]
    CannotFit(String),
    #[error("invalid dataset spec: {0}")]
    BadSpec(String),
    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("unknown split '{0}' (expected train, val, or test)")]
    UnknownSplit(String),
    #[error(transparent)]
    Image(#[from] imgio::ImgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

/// Background texture family. Only low-frequency noise is implemented; the
/// enum keeps the on-disk spec self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    LowFreqNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Blob base radius range as a fraction of the image side.
    pub object_scale: (f64, f64),
    pub background: BackgroundKind,
    /// Discriminative patch area as a fraction of the object area.
    pub part_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> DatasetSpec {
        DatasetSpec {
            classes: 4,
            train_per_class: 50,
            val_per_class: 20,
            test_per_class: 30,
            image_size: 64,
            object_scale: (0.17, 0.24),
            background: BackgroundKind::LowFreqNoise,
            part_fraction: 0.05,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::BadSpec(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class sample counts must be >= 1".into());
        }
        if !(self.part_fraction > 0.0 && self.part_fraction <= 0.3) {
            return bad(format!("part_fraction must be in (0, 0.3], got {}", self.part_fraction));
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad(format!("object_scale must satisfy 0 < lo <= hi < 0.5, got {lo}..{hi}"));
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        Ok(())
    }

    pub fn count_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// One image with its label and localization ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Channel-major [3, H, W] values in [0,1].
    pub image: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub label: usize,
    pub gt_box: BoundingBox,
    /// Row-major [H, W]; covers the whole object including the patch.
    pub gt_mask: Vec<bool>,
}

impl Sample {
    pub fn mask_tight_box(mask: &[bool], h: usize, w: usize) -> Option<BoundingBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for r in 0..h {
            for c in 0..w {
                if mask[r * w + c] {
                    x1 = x1.min(c);
                    y1 = y1.min(r);
                    x2 = x2.max(c + 1);
                    y2 = y2.max(r + 1);
                }
            }
        }
        if x2 == 0 {
            None
        } else {
            Some(BoundingBox { x1, y1, x2, y2 })
        }
    }
}

/// SplitMix64-style seed derivation, stable across platforms.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p.wrapping_mul(0xbf58476d1ce4e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn sample_id(split: Split, class: usize, idx: usize) -> String {
    format!("{}_c{}_{:03}", split.as_str(), class, idx)
}

/// Render every sample of a split in manifest order.
pub fn render_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    for class in 0..spec.classes {
        for idx in 0..spec.count_for(split) {
            let (sample, _) = render::render_sample(spec, split, class, idx)?;
            out.push(sample);
        }
    }
    Ok(out)
}

/// Write the dataset tree:
///
/// ```text
/// root/spec.json
/// root/{train,val,test}/manifest.csv       id,file,label,x1,y1,x2,y2
/// root/{split}/images/<id>.ppm             binary 8-bit P6
/// root/{split}/masks/<id>.pgm              binary 8-bit P5 (0 or 255)
/// root/{split}/checksums.txt               sha256 per file, manifest order
/// ```
///
/// Identical spec (including seed) produces a byte-identical tree.
pub fn generate(spec: &DatasetSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(root.join("spec.json"), spec_json)?;
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut manifest = String::new();
        manifest.push_str(&format!("# seed={}\n", spec.seed));
        manifest.push_str("id,file,label,x1,y1,x2,y2\n");
        let mut checksums = String::new();
        for sample in render_split(spec, split)? {
            let img_rel = format!("images/{}.ppm", sample.id);
            let mask_rel = format!("masks/{}.pgm", sample.id);
            let img_path = dir.join(&img_rel);
            let seed_comment = format!("seed={}", spec.seed);
            imgio::write_ppm(&img_path, sample.h, sample.w, &sample.image, Some(&seed_comment))?;
            let gray: Vec<f64> =
                sample.gt_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let mask_path = dir.join(&mask_rel);
            imgio::write_pgm(&mask_path, sample.h, sample.w, &gray, Some(&seed_comment))?;
            manifest.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                sample.id,
                img_rel,
                sample.label,
                sample.gt_box.x1,
                sample.gt_box.y1,
                sample.gt_box.x2,
                sample.gt_box.y2
            ));
            checksums.push_str(&format!("{}  {}\n", sha256_hex(&fs::read(&img_path)?), img_rel));
            checksums.push_str(&format!("{}  {}\n", sha256_hex(&fs::read(&mask_path)?), mask_rel));
        }
        let mut f = fs::File::create(dir.join("manifest.csv"))?;
        f.write_all(manifest.as_bytes())?;
        let mut f = fs::File::create(dir.join("checksums.txt"))?;
        f.write_all(checksums.as_bytes())?;
    }
    Ok(())
}

/// Read back the spec a tree was generated with.
pub fn read_spec(root: &Path) -> Result<DatasetSpec> {
    let path = root.join("spec.json");
    let text = fs::read_to_string(&path).map_err(|e| DataError::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Load a split in manifest order, verifying checksums and ground-truth
/// consistency. Pixel values land in [0,1].
pub fn load(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(split.as_str());
    let manifest_path = dir.join("manifest.csv");
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| DataError::Malformed {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let checksum_path = dir.join("checksums.txt");
    let checksum_text = fs::read_to_string(&checksum_path).map_err(|e| DataError::Malformed {
        path: checksum_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut checksums = std::collections::BTreeMap::new();
    for line in checksum_text.lines() {
        if let Some((hash, rel)) = line.split_once("  ") {
            checksums.insert(rel.to_string(), hash.to_string());
        }
    }
    let malformed = |detail: String| DataError::Malformed {
        path: manifest_path.display().to_string(),
        detail,
    };
    let mut samples = Vec::new();
    for line in manifest.lines() {
        if line.starts_with('#') || line.starts_with("id,") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(malformed(format!("expected 7 fields, got {}: '{line}'", fields.len())));
        }
        let id = fields[0].to_string();
        let img_rel = fields[1];
        let label: usize =
            fields[2].parse().map_err(|_| malformed(format!("bad label in '{line}'")))?;
        let nums: Vec<usize> = fields[3..7]
            .iter()
            .map(|f| f.parse().map_err(|_| malformed(format!("bad box in '{line}'"))))
            .collect::<Result<_>>()?;
        let gt_box = BoundingBox { x1: nums[0], y1: nums[1], x2: nums[2], y2: nums[3] };

        let img_path = dir.join(img_rel);
        let img_bytes = fs::read(&img_path).map_err(|e| DataError::Malformed {
            path: img_path.display().to_string(),
            detail: e.to_string(),
        })?;
        match checksums.get(img_rel) {
            Some(expect) if *expect == sha256_hex(&img_bytes) => {}
            _ => return Err(DataError::ChecksumMismatch(img_path.display().to_string())),
        }
        let (h, w, image) = imgio::read_ppm(&img_path)?;

        let mask_rel = format!("masks/{id}.pgm");
        let mask_path = dir.join(&mask_rel);
        let mask_bytes = fs::read(&mask_path).map_err(|e| DataError::Malformed {
            path: mask_path.display().to_string(),
            detail: e.to_string(),
        })?;
        match checksums.get(mask_rel.as_str()) {
            Some(expect) if *expect == sha256_hex(&mask_bytes) => {}
            _ => return Err(DataError::ChecksumMismatch(mask_path.display().to_string())),
        }
        let (mh, mw, gray) = imgio::read_pgm(&mask_path)?;
        if (mh, mw) != (h, w) {
            return Err(DataError::Malformed {
                path: mask_path.display().to_string(),
                detail: format!("mask is {mh}x{mw} but image is {h}x{w}"),
            });
        }
        let gt_mask: Vec<bool> = gray.iter().map(|&v| v >= 0.5).collect();
        if Sample::mask_tight_box(&gt_mask, h, w) != Some(gt_box) {
            return Err(DataError::Malformed {
                path: mask_path.display().to_string(),
                detail: "mask tight box disagrees with manifest box".into(),
            });
        }
        samples.push(Sample { id, image, h, w, label, gt_box, gt_mask });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests;
