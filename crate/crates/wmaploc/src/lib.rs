//! Weakly-supervised object localization from image-level labels.
//!
//! A generator network `g` produces a per-pixel weight map for an input
//! image and is trained against a frozen classifier (or Siamese embedder)
//! `f` so that the weighted image keeps `f`'s output unchanged while the
//! map stays sparse. Localization is read out by thresholding the map,
//! tracing contours, and taking the bounding box of the largest one; a
//! mass-in-box score over a validation set selects the training epoch to
//! keep.
//!
//! Modules:
//! - [`diffcore`]: tape-based reverse-mode autodiff over dense f64 tensors
//! - [`models`]: the classifier, embedder, and encoder-decoder generator
//! - [`objectives`]: classification-invariance and triplet training losses
//! - [`maskgeom`]: threshold / contour / bounding-box extraction
//! - [`stopping`]: mass-in-box score and checkpoint selection
//! - [`metrics`]: box localization and pixel precision-recall metrics
//! - [`synthdata`]: deterministic synthetic dataset with masks and boxes
//! - [`harness`]: training orchestration, checkpoints, reports, CLI

pub mod diffcore;
pub mod harness;
pub mod imgio;
pub mod maskgeom;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod stopping;
pub mod synthdata;
