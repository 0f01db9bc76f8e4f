//! Training objectives for the weight-map generator.
//!
//! The classifier route penalizes the cross-entropy between the (frozen)
//! classifier's distribution on the original image, treated as a constant
//! target, and its distribution on the mask-weighted image, plus a weighted
//! L1 mask regularizer. The Siamese route replaces the divergence with two
//! hinge triplet terms over embedder distances: one separating foreground
//! from background against the full-image embedding, one organizing masked
//! foregrounds by class. Gradients flow only into the generator in both.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_rows, DiffError, Result, Tape, Tensor};
use crate::models::{Classifier, Embedder, Generator, Mode, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Target is the classifier's full softmax distribution on the
    /// unweighted image.
    Soft,
    /// Target is the one-hot argmax of that distribution.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the mask regularizer.
    pub lambda: f64,
    /// Triplet hinge margin.
    pub margin: f64,
    pub target_mode: TargetMode,
    /// Term switches for the Siamese objective.
    pub inner: bool,
    pub outer: bool,
    pub reg: bool,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            lambda: 1.0,
            margin: 1.0,
            target_mode: TargetMode::Soft,
            inner: true,
            outer: true,
            reg: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(DiffError::BadAttribute {
                op: "loss_config",
                detail: format!("lambda must be >= 0, got {}", self.lambda),
            });
        }
        if self.margin <= 0.0 {
            return Err(DiffError::BadAttribute {
                op: "loss_config",
                detail: format!("margin must be > 0, got {}", self.margin),
            });
        }
        Ok(())
    }
}

/// Foreground and background views: `(M .* I, (1-M) .* I)`, the mask
/// broadcast across channels. The two views sum back to the image.
pub fn masked_views(tape: &Tape, images: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let fg = tape.elementwise_mul(images, mask)?;
    let inv = tape.one_minus(mask)?;
    let bg = tape.elementwise_mul(images, &inv)?;
    Ok((fg, bg))
}

/// Mean absolute value of the mask; in [0,1] for masks in [0,1] and
/// independent of resolution.
pub fn regularizer(tape: &Tape, mask: &Tensor) -> Result<Tensor> {
    tape.mean_abs(mask)
}

fn ensure_frozen(op: &'static str, frozen: bool) -> Result<()> {
    if !frozen {
        return Err(DiffError::BadAttribute {
            op,
            detail: "the pretrained network must be frozen (no trainable parameters)".into(),
        });
    }
    Ok(())
}

/// Constant classification target from the frozen classifier on the
/// unweighted images.
fn classification_target(
    tape: &Tape,
    f: &Classifier,
    images: &Tensor,
    mode: TargetMode,
) -> Result<Tensor> {
    let logits = f.forward(tape, images, Mode::Eval)?;
    let shape = logits.shape();
    let (b, d) = (shape[0], shape[1]);
    let probs = softmax_rows(&logits.detach().to_vec(), b, d);
    let values = match mode {
        TargetMode::Soft => probs,
        TargetMode::Hard => {
            let mut one_hot = vec![0.0; b * d];
            for row in 0..b {
                let slice = &probs[row * d..(row + 1) * d];
                let mut best = 0usize;
                for (j, v) in slice.iter().enumerate() {
                    if *v > slice[best] {
                        best = j;
                    }
                }
                one_hot[row * d + best] = 1.0;
            }
            one_hot
        }
    };
    Tensor::new(&[b, d], values)
}

/// Scalar loss plus diagnostics from one objective evaluation.
pub struct LossParts {
    pub loss: Tensor,
    /// Classifier-divergence term (classifier route) or 0.
    pub divergence: f64,
    /// Inner/outer triplet values (Siamese route) or 0.
    pub inner: f64,
    pub outer: f64,
    /// Unweighted regularizer value.
    pub regularizer: f64,
    /// Mean of the anchor mask, for collapse monitoring.
    pub mask_mean: f64,
    /// Anchor masks [B,1,H,W].
    pub mask: Tensor,
}

/// Classification-invariance objective:
/// `CE(target, f(I .* g(I))) + lambda * mean|g(I)|` with the target held
/// constant and the classifier frozen.
pub fn method1_loss(
    tape: &Tape,
    f: &Classifier,
    g: &Generator,
    images: &Tensor,
    cfg: &LossConfig,
    g_mode: Mode,
) -> Result<LossParts> {
    cfg.validate()?;
    ensure_frozen("method1_loss", f.is_frozen())?;
    let target = classification_target(tape, f, images, cfg.target_mode)?;
    let mask = g.forward(tape, images, g_mode)?;
    let (fg, _bg) = masked_views(tape, images, &mask)?;
    let logits = f.forward(tape, &fg, Mode::Eval)?;
    let divergence = tape.softmax_cross_entropy_with_soft_target(&logits, &target)?;
    let reg = regularizer(tape, &mask)?;
    let weighted = tape.scale(&reg, cfg.lambda)?;
    let loss = tape.add(&divergence, &weighted)?;
    let mask_mean = mask.to_vec().iter().sum::<f64>() / mask.numel() as f64;
    Ok(LossParts {
        loss,
        divergence: divergence.item(),
        inner: 0.0,
        outer: 0.0,
        regularizer: reg.item(),
        mask_mean,
        mask,
    })
}

/// `mean(max(d(a,p) - d(a,n) + margin, 0))` over the batch.
fn triplet_hinge(
    tape: &Tape,
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let d_ap = tape.l2_distance(anchor, positive)?;
    let d_an = tape.l2_distance(anchor, negative)?;
    let diff = tape.sub(&d_ap, &d_an)?;
    let shifted = tape.add_scalar(&diff, margin)?;
    let hinge = tape.relu(&shifted)?;
    tape.mean_all(&hinge)
}

/// Embedder pretraining triplet loss over raw images: pull same-class pairs
/// together, push different-class pairs apart.
pub fn pretrain_triplet_loss(
    tape: &Tape,
    f: &Embedder,
    anchors: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    cfg: &LossConfig,
    mode: Mode,
) -> Result<Tensor> {
    cfg.validate()?;
    let za = f.forward(tape, anchors, mode)?;
    let zp = f.forward(tape, positives, mode)?;
    let zn = f.forward(tape, negatives, mode)?;
    triplet_hinge(tape, &za, &zp, &zn, cfg.margin)
}

/// Inner term: foreground embedding close to the full-image embedding
/// (a constant), background embedding far from it.
pub fn inner_triplet(
    tape: &Tape,
    f: &Embedder,
    g: &Generator,
    anchors: &Tensor,
    cfg: &LossConfig,
    g_mode: Mode,
) -> Result<Tensor> {
    cfg.validate()?;
    ensure_frozen("inner_triplet", f.is_frozen())?;
    let mask = g.forward(tape, anchors, g_mode)?;
    let (fg, bg) = masked_views(tape, anchors, &mask)?;
    inner_from_views(tape, f, anchors, &fg, &bg, cfg)
}

fn inner_from_views(
    tape: &Tape,
    f: &Embedder,
    anchors: &Tensor,
    fg: &Tensor,
    bg: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let za = f.forward(tape, anchors, Mode::Eval)?.detach();
    let zf = f.forward(tape, fg, Mode::Eval)?;
    let zb = f.forward(tape, bg, Mode::Eval)?;
    triplet_hinge(tape, &za, &zf, &zb, cfg.margin)
}

/// Outer term: masked foregrounds of the same class close, different
/// classes apart.
pub fn outer_triplet(
    tape: &Tape,
    f: &Embedder,
    g: &Generator,
    anchors: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    cfg: &LossConfig,
    g_mode: Mode,
) -> Result<Tensor> {
    cfg.validate()?;
    ensure_frozen("outer_triplet", f.is_frozen())?;
    let mask_a = g.forward(tape, anchors, g_mode)?;
    let (fg_a, _) = masked_views(tape, anchors, &mask_a)?;
    let zf_a = f.forward(tape, &fg_a, Mode::Eval)?;
    outer_from_anchor(tape, f, g, &zf_a, positives, negatives, cfg, g_mode)
}

fn outer_from_anchor(
    tape: &Tape,
    f: &Embedder,
    g: &Generator,
    zf_a: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    cfg: &LossConfig,
    g_mode: Mode,
) -> Result<Tensor> {
    let mask_p = g.forward(tape, positives, g_mode)?;
    let (fg_p, _) = masked_views(tape, positives, &mask_p)?;
    let zf_p = f.forward(tape, &fg_p, Mode::Eval)?;
    let mask_n = g.forward(tape, negatives, g_mode)?;
    let (fg_n, _) = masked_views(tape, negatives, &mask_n)?;
    let zf_n = f.forward(tape, &fg_n, Mode::Eval)?;
    triplet_hinge(tape, zf_a, &zf_p, &zf_n, cfg.margin)
}

/// Full Siamese objective with switchable terms:
/// `inner + outer + lambda * mean|M_a|`. The anchor's foreground embedding
/// is shared between the two triplet terms.
pub fn method2_loss(
    tape: &Tape,
    f: &Embedder,
    g: &Generator,
    anchors: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    cfg: &LossConfig,
    g_mode: Mode,
) -> Result<LossParts> {
    cfg.validate()?;
    ensure_frozen("method2_loss", f.is_frozen())?;
    let mask_a = g.forward(tape, anchors, g_mode)?;
    let mask_mean = mask_a.to_vec().iter().sum::<f64>() / mask_a.numel() as f64;
    let (fg_a, bg_a) = masked_views(tape, anchors, &mask_a)?;

    let mut loss = Tensor::scalar(0.0);
    let mut inner_value = 0.0;
    let mut outer_value = 0.0;
    let mut reg_value = 0.0;

    let needs_zfa = cfg.inner || cfg.outer;
    let zf_a = if needs_zfa { Some(f.forward(tape, &fg_a, Mode::Eval)?) } else { None };
    if cfg.inner {
        let za = f.forward(tape, anchors, Mode::Eval)?.detach();
        let zb = f.forward(tape, &bg_a, Mode::Eval)?;
        let inner = triplet_hinge(tape, &za, zf_a.as_ref().unwrap(), &zb, cfg.margin)?;
        inner_value = inner.item();
        loss = tape.add(&loss, &inner)?;
    }
    if cfg.outer {
        let outer =
            outer_from_anchor(tape, f, g, zf_a.as_ref().unwrap(), positives, negatives, cfg, g_mode)?;
        outer_value = outer.item();
        loss = tape.add(&loss, &outer)?;
    }
    if cfg.reg {
        let reg = regularizer(tape, &mask_a)?;
        reg_value = reg.item();
        let weighted = tape.scale(&reg, cfg.lambda)?;
        loss = tape.add(&loss, &weighted)?;
    }
    Ok(LossParts {
        loss,
        divergence: 0.0,
        inner: inner_value,
        outer: outer_value,
        regularizer: reg_value,
        mask_mean,
        mask: mask_a,
    })
}

/// Batched Siamese objective over one set of unique images with triplet
/// roles given as indices. Masks, views, and embeddings are computed once
/// per image and the triplet terms gather rows, which is algebraically the
/// per-triple objective with the batch-statistics coupling of a single
/// generator pass. This is the training-loop form of [`method2_loss`].
pub fn method2_batch_loss(
    tape: &Tape,
    f: &Embedder,
    g: &Generator,
    images: &Tensor,
    triples: &[(usize, usize, usize)],
    cfg: &LossConfig,
    g_mode: Mode,
) -> Result<LossParts> {
    cfg.validate()?;
    ensure_frozen("method2_loss", f.is_frozen())?;
    if triples.is_empty() {
        return Err(DiffError::BadAttribute {
            op: "method2_loss",
            detail: "no triplets in batch".into(),
        });
    }
    let mask = g.forward(tape, images, g_mode)?;
    let mask_mean = mask.to_vec().iter().sum::<f64>() / mask.numel() as f64;
    let (fg, bg) = masked_views(tape, images, &mask)?;
    let anchor_idx: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let pos_idx: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let neg_idx: Vec<usize> = triples.iter().map(|t| t.2).collect();

    let mut loss = Tensor::scalar(0.0);
    let mut inner_value = 0.0;
    let mut outer_value = 0.0;
    let mut reg_value = 0.0;

    let zf = if cfg.inner || cfg.outer { Some(f.forward(tape, &fg, Mode::Eval)?) } else { None };
    if cfg.inner {
        let zi = f.forward(tape, images, Mode::Eval)?.detach();
        let zb = f.forward(tape, &bg, Mode::Eval)?;
        let za = tape.gather_rows(&zi, &anchor_idx)?;
        let zfa = tape.gather_rows(zf.as_ref().unwrap(), &anchor_idx)?;
        let zba = tape.gather_rows(&zb, &anchor_idx)?;
        let inner = triplet_hinge(tape, &za, &zfa, &zba, cfg.margin)?;
        inner_value = inner.item();
        loss = tape.add(&loss, &inner)?;
    }
    if cfg.outer {
        let zf = zf.as_ref().unwrap();
        let zfa = tape.gather_rows(zf, &anchor_idx)?;
        let zfp = tape.gather_rows(zf, &pos_idx)?;
        let zfn = tape.gather_rows(zf, &neg_idx)?;
        let outer = triplet_hinge(tape, &zfa, &zfp, &zfn, cfg.margin)?;
        outer_value = outer.item();
        loss = tape.add(&loss, &outer)?;
    }
    if cfg.reg {
        let reg = regularizer(tape, &mask)?;
        reg_value = reg.item();
        let weighted = tape.scale(&reg, cfg.lambda)?;
        loss = tape.add(&loss, &weighted)?;
    }
    Ok(LossParts {
        loss,
        divergence: 0.0,
        inner: inner_value,
        outer: outer_value,
        regularizer: reg_value,
        mask_mean,
        mask,
    })
}
