use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::config::{Method, RunConfig};
use super::data::{batch_triplets, epoch_batches, to_image_tensor, to_one_hot};
use super::eval;
use crate::diffcore::{Sgd, Tape};
use crate::models::{Classifier, Embedder, Generator, Mode, Network};
use crate::objectives::{method1_loss, method2_batch_loss, pretrain_triplet_loss};
use crate::stopping::EpochScore;
use crate::synthdata::{augment, derive_seed, AugmentMode, Sample};

const TAG_CLS_INIT: u64 = 0x11;
const TAG_CLS_EPOCH: u64 = 0x12;
const TAG_EMB_INIT: u64 = 0x21;
const TAG_EMB_EPOCH: u64 = 0x22;
const TAG_EMB_VAL: u64 = 0x23;
const TAG_GEN_INIT: u64 = 0x31;
const TAG_GEN_EPOCH: u64 = 0x32;

fn rng_for(seed: u64, tag: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, k]))
}

fn augment_batch(
    samples: &[Sample],
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<Vec<Sample>> {
    indices
        .iter()
        .map(|&i| augment(&samples[i], rng, AugmentMode::Train).map_err(Into::into))
        .collect()
}

fn append_line(path: &PathBuf, line: &str) -> anyhow::Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Train the label classifier with softmax cross-entropy, retaining the
/// best-validation-accuracy checkpoint (ties keep the earlier epoch).
pub fn train_classifier(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
) -> anyhow::Result<PathBuf> {
    if train.iter().chain(val).any(|s| s.label >= cfg.dataset.classes) {
        bail!(
            "dataset labels exceed the configured class count {}",
            cfg.dataset.classes
        );
    }
    let dir = cfg.classifier_dir();
    fs::create_dir_all(&dir)?;
    let log_path = dir.join("log.csv");
    fs::write(&log_path, format!("# seed={}\nepoch,train_loss,val_acc\n", cfg.seed))?;
    let best_path = dir.join("best.params");

    let net = Classifier::init(
        &cfg.model.widths,
        cfg.dataset.classes,
        derive_seed(cfg.seed, &[TAG_CLS_INIT]),
    );
    let opt_cfg = &cfg.classifier;
    let mut opt = Sgd::new(opt_cfg.lr, opt_cfg.momentum, opt_cfg.weight_decay);
    let params = net.trainable_params();
    let mut best_acc = f64::NEG_INFINITY;
    for epoch in 0..opt_cfg.epochs {
        opt.set_lr(opt_cfg.lr_at_epoch(epoch));
        let mut rng = rng_for(cfg.seed, TAG_CLS_EPOCH, epoch as u64);
        let mut loss_sum = 0.0;
        for batch in epoch_batches(train.len(), opt_cfg.batch_size, &mut rng) {
            let augmented = augment_batch(train, &batch, &mut rng)?;
            let refs: Vec<&Sample> = augmented.iter().collect();
            let images = to_image_tensor(&refs);
            let targets = to_one_hot(&refs, cfg.dataset.classes);
            let tape = Tape::new();
            let logits = net.forward(&tape, &images, Mode::Train)?;
            let loss = tape.softmax_cross_entropy_with_soft_target(&logits, &targets)?;
            loss_sum += loss.item() * batch.len() as f64;
            tape.backward(&loss)?;
            opt.step(&params)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_acc = eval::classifier_accuracy(&net, val)?;
        append_line(&log_path, &format!("{epoch},{train_loss},{val_acc}\n"))?;
        if val_acc > best_acc {
            best_acc = val_acc;
            save_checkpoint(
                &net,
                &best_path,
                &CheckpointMeta {
                    epoch,
                    config_hash: cfg.classifier_scope_hash(),
                    seed: cfg.seed,
                    mean_s: None,
                },
            )?;
        }
    }
    Ok(best_path)
}

/// Pretrain the Siamese embedder with the image-level triplet loss,
/// retaining the lowest-validation-loss checkpoint.
pub fn train_embedder(cfg: &RunConfig, train: &[Sample], val: &[Sample]) -> anyhow::Result<PathBuf> {
    let dir = cfg.embedder_dir();
    fs::create_dir_all(&dir)?;
    let log_path = dir.join("log.csv");
    fs::write(&log_path, format!("# seed={}\nepoch,train_loss,val_loss\n", cfg.seed))?;
    let best_path = dir.join("best.params");

    let net = Embedder::init(
        &cfg.model.widths,
        cfg.model.embedding_dim,
        derive_seed(cfg.seed, &[TAG_EMB_INIT]),
    );
    let opt_cfg = &cfg.embedder;
    let mut opt = Sgd::new(opt_cfg.lr, opt_cfg.momentum, opt_cfg.weight_decay);
    let params = net.trainable_params();

    // fixed validation triplets so the selection criterion is comparable
    // across epochs
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let mut val_rng = rng_for(cfg.seed, TAG_EMB_VAL, 0);
    let val_triples = batch_triplets(&val_labels, &mut val_rng);
    if val_triples.is_empty() {
        bail!("validation split has no usable triplets");
    }

    let mut best_loss = f64::INFINITY;
    for epoch in 0..opt_cfg.epochs {
        opt.set_lr(opt_cfg.lr_at_epoch(epoch));
        let mut rng = rng_for(cfg.seed, TAG_EMB_EPOCH, epoch as u64);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in epoch_batches(train.len(), opt_cfg.batch_size, &mut rng) {
            let augmented = augment_batch(train, &batch, &mut rng)?;
            let labels: Vec<usize> = augmented.iter().map(|s| s.label).collect();
            let triples = batch_triplets(&labels, &mut rng);
            if triples.is_empty() {
                continue;
            }
            let anchors: Vec<&Sample> = triples.iter().map(|t| &augmented[t.0]).collect();
            let positives: Vec<&Sample> = triples.iter().map(|t| &augmented[t.1]).collect();
            let negatives: Vec<&Sample> = triples.iter().map(|t| &augmented[t.2]).collect();
            let tape = Tape::new();
            let loss = pretrain_triplet_loss(
                &tape,
                &net,
                &to_image_tensor(&anchors),
                &to_image_tensor(&positives),
                &to_image_tensor(&negatives),
                &cfg.loss,
                Mode::Train,
            )?;
            loss_sum += loss.item() * triples.len() as f64;
            count += triples.len();
            tape.backward(&loss)?;
            opt.step(&params)?;
        }
        let train_loss = if count > 0 { loss_sum / count as f64 } else { 0.0 };
        let val_loss = eval::embedder_triplet_loss(&net, val, &val_triples, &cfg.loss)?;
        append_line(&log_path, &format!("{epoch},{train_loss},{val_loss}\n"))?;
        if val_loss < best_loss {
            best_loss = val_loss;
            save_checkpoint(
                &net,
                &best_path,
                &CheckpointMeta {
                    epoch,
                    config_hash: cfg.embedder_scope_hash(),
                    seed: cfg.seed,
                    mean_s: None,
                },
            )?;
        }
    }
    Ok(best_path)
}

/// The frozen pretrained network the generator trains against.
pub enum FrozenF {
    Classifier(Classifier),
    Embedder(Embedder),
}

impl FrozenF {
    pub fn param_digest(&self) -> String {
        let bytes = match self {
            FrozenF::Classifier(n) => n.to_store().to_bytes(),
            FrozenF::Embedder(n) => n.to_store().to_bytes(),
        };
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }
}

/// Load the method's pretrained network from its best checkpoint and freeze
/// it. The checkpoint's recorded scope hash must match the configuration.
pub fn load_frozen_f(cfg: &RunConfig, path: Option<&std::path::Path>) -> anyhow::Result<FrozenF> {
    let default_path = cfg.f_best_checkpoint();
    let path = path.unwrap_or(&default_path);
    match cfg.method {
        Method::ClassifierInvariance => {
            let net = Classifier::init(&cfg.model.widths, cfg.dataset.classes, 0);
            load_checkpoint(&net, path, &cfg.classifier_scope_hash())?;
            net.set_trainable(false);
            Ok(FrozenF::Classifier(net))
        }
        Method::SiameseTriplet => {
            let net = Embedder::init(&cfg.model.widths, cfg.model.embedding_dim, 0);
            load_checkpoint(&net, path, &cfg.embedder_scope_hash())?;
            net.set_trainable(false);
            Ok(FrozenF::Embedder(net))
        }
    }
}

pub fn generator_checkpoint_path(cfg: &RunConfig, epoch: usize) -> PathBuf {
    cfg.generator_dir().join(format!("epoch_{epoch:03}.params"))
}

/// Train the weight-map generator against the frozen network. Per epoch:
/// one training pass, a validation scoring pass (at the configured
/// cadence), a scores-log row, and a checkpoint. The frozen network's
/// parameters are verified bit-identical before and after.
pub fn train_generator(
    cfg: &RunConfig,
    f: &FrozenF,
    train: &[Sample],
    val: &[Sample],
) -> anyhow::Result<Vec<EpochScore>> {
    let dir = cfg.generator_dir();
    fs::create_dir_all(&dir)?;
    let scores_path = dir.join("scores.csv");
    fs::write(&scores_path, format!("# seed={}\nepoch,mean_S,n_images\n", cfg.seed))?;
    let log_path = dir.join("log.csv");
    fs::write(&log_path, format!("# seed={}\nepoch,train_loss,val_mask_mean\n", cfg.seed))?;

    let frozen_before = f.param_digest();
    let g = Generator::init(&cfg.model.widths, derive_seed(cfg.seed, &[TAG_GEN_INIT]));
    let opt_cfg = &cfg.generator;
    let mut opt = Sgd::new(opt_cfg.lr, opt_cfg.momentum, opt_cfg.weight_decay);
    let params = g.trainable_params();
    let hash = cfg.generator_scope_hash();
    let mut scores = Vec::new();

    for epoch in 0..opt_cfg.epochs {
        opt.set_lr(opt_cfg.lr_at_epoch(epoch));
        let mut rng = rng_for(cfg.seed, TAG_GEN_EPOCH, epoch as u64);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in epoch_batches(train.len(), opt_cfg.batch_size, &mut rng) {
            let augmented = augment_batch(train, &batch, &mut rng)?;
            let tape = Tape::new();
            let loss = match (cfg.method, f) {
                (Method::ClassifierInvariance, FrozenF::Classifier(fc)) => {
                    let refs: Vec<&Sample> = augmented.iter().collect();
                    let images = to_image_tensor(&refs);
                    let parts = method1_loss(&tape, fc, &g, &images, &cfg.loss, Mode::Train)?;
                    loss_sum += parts.loss.item() * refs.len() as f64;
                    count += refs.len();
                    parts.loss
                }
                (Method::SiameseTriplet, FrozenF::Embedder(fe)) => {
                    let labels: Vec<usize> = augmented.iter().map(|s| s.label).collect();
                    let triples = batch_triplets(&labels, &mut rng);
                    if triples.is_empty() {
                        continue;
                    }
                    let refs: Vec<&Sample> = augmented.iter().collect();
                    let parts = method2_batch_loss(
                        &tape,
                        fe,
                        &g,
                        &to_image_tensor(&refs),
                        &triples,
                        &cfg.loss,
                        Mode::Train,
                    )?;
                    loss_sum += parts.loss.item() * triples.len() as f64;
                    count += triples.len();
                    parts.loss
                }
                _ => bail!("method does not match the loaded pretrained network"),
            };
            tape.backward(&loss)?;
            opt.step(&params)?;
        }
        let train_loss = if count > 0 { loss_sum / count as f64 } else { 0.0 };

        let mut mean_s_meta = None;
        let mut val_mask_mean = f64::NAN;
        if epoch % cfg.eval_every == 0 || epoch + 1 == opt_cfg.epochs {
            let (per_image, mask_mean) = eval::validation_scores(&g, val)?;
            let score = EpochScore::new(epoch, per_image);
            append_line(
                &scores_path,
                &format!("{},{},{}\n", epoch, score.mean_s, score.per_image.len()),
            )?;
            mean_s_meta = Some(score.mean_s);
            val_mask_mean = mask_mean;
            scores.push(score);
        }
        append_line(&log_path, &format!("{epoch},{train_loss},{val_mask_mean}\n"))?;
        save_checkpoint(
            &g,
            &generator_checkpoint_path(cfg, epoch),
            &CheckpointMeta { epoch, config_hash: hash.clone(), seed: cfg.seed, mean_s: mean_s_meta },
        )?;
    }

    let frozen_after = f.param_digest();
    if frozen_before != frozen_after {
        bail!("frozen network parameters changed during generator training");
    }
    Ok(scores)
}

/// Run the full pipeline for the configuration: dataset (generated if
/// missing), pretrained network, generator with per-epoch scoring, then
/// selection and evaluation.
pub fn run_all(cfg: &RunConfig) -> anyhow::Result<super::eval::Report> {
    cfg.validate().map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
    fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.json"))?;
    super::ensure_dataset(cfg)?;
    let train = crate::synthdata::load(&cfg.dataset_root, crate::synthdata::Split::Train)?;
    let val = crate::synthdata::load(&cfg.dataset_root, crate::synthdata::Split::Val)?;
    match cfg.method {
        Method::ClassifierInvariance => {
            train_classifier(cfg, &train, &val)?;
        }
        Method::SiameseTriplet => {
            train_embedder(cfg, &train, &val)?;
        }
    }
    let f = load_frozen_f(cfg, None)?;
    train_generator(cfg, &f, &train, &val)?;
    eval::select_and_evaluate(&cfg.out_dir, crate::metrics::PxApMode::Standard)
        .context("selection and evaluation")
}
