use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::config::{Method, RunConfig};
use super::data::to_image_tensor;
use super::train::generator_checkpoint_path;
use crate::diffcore::{softmax_rows, Tape};
use crate::imgio;
use crate::maskgeom::{extract_box, WeightMap};
use crate::metrics::{
    default_grid, gt_known_loc, pr_curve, px_ap_with_mode, top1_cls, top1_loc, EvalRecord,
    PixelEval, PxApMode,
};
use crate::models::{Classifier, Embedder, Generator, Mode, Network};
use crate::objectives::LossConfig;
use crate::stopping::{s_score, select_checkpoint, EpochScore};
use crate::synthdata::{augment, load, AugmentMode, Sample, Split};

const EVAL_BATCH: usize = 32;
const PR_GRID_POINTS: usize = 101;

/// Deterministic eval-protocol (center crop, no flip) views of samples.
pub fn eval_views(samples: &[Sample]) -> anyhow::Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    samples
        .iter()
        .map(|s| augment(s, &mut rng, AugmentMode::Eval).map_err(Into::into))
        .collect()
}

/// Run a closure with the network's recording turned off, restoring the
/// previous trainability afterwards.
fn without_recording<N: Network, T>(
    net: &N,
    f: impl FnOnce() -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    let was_trainable = !net.is_frozen();
    net.set_trainable(false);
    let out = f();
    if was_trainable {
        net.set_trainable(true);
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted classes for already-eval-augmented samples.
pub fn classifier_predictions(
    net: &Classifier,
    views: &[Sample],
) -> anyhow::Result<Vec<usize>> {
    without_recording(net, || {
        let mut preds = Vec::with_capacity(views.len());
        for chunk in views.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let logits = net.forward(&Tape::new(), &to_image_tensor(&refs), Mode::Eval)?;
            let values = logits.to_vec();
            let d = net.num_classes;
            for row in 0..refs.len() {
                preds.push(argmax(&values[row * d..(row + 1) * d]));
            }
        }
        Ok(preds)
    })
}

pub fn classifier_accuracy(net: &Classifier, samples: &[Sample]) -> anyhow::Result<f64> {
    let views = eval_views(samples)?;
    let preds = classifier_predictions(net, &views)?;
    let hits = preds.iter().zip(&views).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / views.len().max(1) as f64)
}

/// Embeddings of already-eval-augmented samples, one row per sample.
pub fn embed_views(net: &Embedder, views: &[Sample]) -> anyhow::Result<Vec<Vec<f64>>> {
    without_recording(net, || {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let z = net.forward(&Tape::new(), &to_image_tensor(&refs), Mode::Eval)?;
            let values = z.to_vec();
            for row in 0..refs.len() {
                out.push(values[row * net.dim..(row + 1) * net.dim].to_vec());
            }
        }
        Ok(out)
    })
}

/// Mean hinge triplet loss of fixed validation triples, eval protocol.
pub fn embedder_triplet_loss(
    net: &Embedder,
    samples: &[Sample],
    triples: &[(usize, usize, usize)],
    cfg: &LossConfig,
) -> anyhow::Result<f64> {
    let views = eval_views(samples)?;
    let z = embed_views(net, &views)?;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for &(a, p, n) in triples {
        total += (dist(&z[a], &z[p]) - dist(&z[a], &z[n]) + cfg.margin).max(0.0);
    }
    Ok(total / triples.len().max(1) as f64)
}

/// Class centroids of embeddings over (eval views of) labeled samples.
pub fn class_centroids(
    net: &Embedder,
    samples: &[Sample],
    classes: usize,
) -> anyhow::Result<Vec<Vec<f64>>> {
    let views = eval_views(samples)?;
    let z = embed_views(net, &views)?;
    let mut sums = vec![vec![0.0; net.dim]; classes];
    let mut counts = vec![0usize; classes];
    for (zi, s) in z.iter().zip(&views) {
        counts[s.label] += 1;
        for (acc, v) in sums[s.label].iter_mut().zip(zi) {
            *acc += v;
        }
    }
    for (c, sum) in sums.iter_mut().enumerate() {
        if counts[c] > 0 {
            for v in sum.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
    }
    Ok(sums)
}

/// Nearest-centroid class predictions; ties break toward the lower class.
pub fn embedder_predictions(
    net: &Embedder,
    centroids: &[Vec<f64>],
    views: &[Sample],
) -> anyhow::Result<Vec<usize>> {
    let z = embed_views(net, views)?;
    Ok(z.iter()
        .map(|zi| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d: f64 = zi.iter().zip(centroid).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Weight maps for already-eval-augmented samples.
pub fn generator_maps(g: &Generator, views: &[Sample]) -> anyhow::Result<Vec<WeightMap>> {
    without_recording(g, || {
        let mut maps = Vec::with_capacity(views.len());
        for chunk in views.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (h, w) = (refs[0].h, refs[0].w);
            let mask = g.forward(&Tape::new(), &to_image_tensor(&refs), Mode::Eval)?;
            let values = mask.to_vec();
            for row in 0..refs.len() {
                let map = WeightMap::new(h, w, values[row * h * w..(row + 1) * h * w].to_vec())
                    .map_err(|e| anyhow::anyhow!("generator output: {e}"))?;
                maps.push(map);
            }
        }
        Ok(maps)
    })
}

/// Per-image mass-in-box scores over the validation set plus the mean mask
/// value, both under the eval protocol.
pub fn validation_scores(g: &Generator, val: &[Sample]) -> anyhow::Result<(Vec<f64>, f64)> {
    let views = eval_views(val)?;
    let maps = generator_maps(g, &views)?;
    let mut scores = Vec::with_capacity(maps.len());
    let mut mass = 0.0;
    let mut count = 0usize;
    for map in &maps {
        mass += map.values().iter().sum::<f64>();
        count += map.values().len();
        let ext = extract_box(map);
        scores.push(s_score(&ext.thresholded, &ext.bbox));
    }
    Ok((scores, mass / count.max(1) as f64))
}

pub fn read_scores(path: &Path) -> anyhow::Result<Vec<EpochScore>> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("missing score log {}: {e}", path.display()))?;
    let mut scores = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("epoch,") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            bail!("malformed score row '{line}' in {}", path.display());
        }
        let epoch: usize = fields[0].parse().context("bad epoch")?;
        let mean_s: f64 = fields[1].parse().context("bad mean_S")?;
        scores.push(EpochScore { epoch, mean_s, per_image: Vec::new() });
    }
    Ok(scores)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub gt_known_loc: f64,
    pub top1_loc: f64,
    pub top1_cls: f64,
    pub px_ap: f64,
    pub mean_s_selected: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub method: String,
    pub selected_epoch: usize,
    pub config_hash: String,
    pub n_test: usize,
    pub metrics: ReportMetrics,
    pub pr_curve: PrCurve,
}

struct LoadedRun {
    cfg: RunConfig,
    generator: Generator,
    selected_epoch: usize,
    mean_s_selected: f64,
}

fn load_selected_generator(run_dir: &Path) -> anyhow::Result<LoadedRun> {
    let cfg = RunConfig::load(&run_dir.join("config.json"))?;
    let scores = read_scores(&cfg.generator_dir().join("scores.csv"))?;
    let idx = select_checkpoint(&scores).map_err(|e| anyhow::anyhow!("{e}"))?;
    let selected_epoch = scores[idx].epoch;
    let generator = Generator::init(&cfg.model.widths, 0);
    load_checkpoint(
        &generator,
        &generator_checkpoint_path(&cfg, selected_epoch),
        &cfg.generator_scope_hash(),
    )?;
    generator.set_trainable(false);
    Ok(LoadedRun { cfg, generator, selected_epoch, mean_s_selected: scores[idx].mean_s })
}

fn predictions_for(cfg: &RunConfig, views: &[Sample]) -> anyhow::Result<Vec<usize>> {
    match cfg.method {
        Method::ClassifierInvariance => {
            let net = Classifier::init(&cfg.model.widths, cfg.dataset.classes, 0);
            load_checkpoint(&net, &cfg.f_best_checkpoint(), &cfg.classifier_scope_hash())?;
            net.set_trainable(false);
            classifier_predictions(&net, views)
        }
        Method::SiameseTriplet => {
            let net = Embedder::init(&cfg.model.widths, cfg.model.embedding_dim, 0);
            load_checkpoint(&net, &cfg.f_best_checkpoint(), &cfg.embedder_scope_hash())?;
            net.set_trainable(false);
            let train = load(&cfg.dataset_root, Split::Train)?;
            let centroids = class_centroids(&net, &train, cfg.dataset.classes)?;
            embedder_predictions(&net, &centroids, views)
        }
    }
}

fn write_boxes_csv(
    path: &Path,
    seed: u64,
    rows: &[(String, crate::maskgeom::BoundingBox, bool)],
) -> anyhow::Result<()> {
    let mut text = format!("# seed={seed}\nimage_id,x1,y1,x2,y2,degenerate_flag\n");
    for (id, bb, degenerate) in rows {
        text.push_str(&format!(
            "{id},{},{},{},{},{}\n",
            bb.x1,
            bb.y1,
            bb.x2,
            bb.y2,
            u8::from(*degenerate)
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Select the best epoch from the score log, then evaluate that checkpoint
/// on the test split: box metrics, pixel average precision, per-image boxes
/// CSV, and thresholded-map exports. Writes `report.json`, `boxes.csv`,
/// `maps/`, and the `SELECTED` marker under the run directory.
pub fn select_and_evaluate(run_dir: &Path, pxap_mode: PxApMode) -> anyhow::Result<Report> {
    let run = load_selected_generator(run_dir)?;
    let cfg = &run.cfg;
    let marker = cfg.generator_dir().join("SELECTED");
    fs::write(&marker, format!("# seed={}\nepoch={}\n", cfg.seed, run.selected_epoch))?;

    let test = load(&cfg.dataset_root, Split::Test)?;
    let views = eval_views(&test)?;
    let maps = generator_maps(&run.generator, &views)?;
    let preds = predictions_for(cfg, &views)?;

    let maps_dir = run_dir.join("maps");
    fs::create_dir_all(&maps_dir)?;
    let mut records = Vec::with_capacity(views.len());
    let mut pixel_evals = Vec::with_capacity(views.len());
    let mut box_rows = Vec::with_capacity(views.len());
    let seed_comment = format!("seed={}", cfg.seed);
    for ((view, map), pred_class) in views.iter().zip(&maps).zip(&preds) {
        let ext = extract_box(map);
        imgio::write_pgm(
            &maps_dir.join(format!("{}.pgm", view.id)),
            map.h,
            map.w,
            ext.thresholded.values(),
            Some(&seed_comment),
        )?;
        box_rows.push((view.id.clone(), ext.bbox, ext.degenerate));
        records.push(EvalRecord {
            image_id: view.id.clone(),
            pred_box: ext.bbox,
            pred_class: *pred_class,
            gt_box: view.gt_box,
            gt_class: view.label,
        });
        pixel_evals.push(PixelEval { map: map.clone(), truth: view.gt_mask.clone() });
    }
    write_boxes_csv(&run_dir.join("boxes.csv"), cfg.seed, &box_rows)?;

    let grid = default_grid(PR_GRID_POINTS);
    let (precision, recall) = pr_curve(&pixel_evals, &grid)?;
    let report = Report {
        seed: cfg.seed,
        method: cfg.method.to_string(),
        selected_epoch: run.selected_epoch,
        config_hash: cfg.generator_scope_hash(),
        n_test: views.len(),
        metrics: ReportMetrics {
            gt_known_loc: gt_known_loc(&records)?,
            top1_loc: top1_loc(&records)?,
            top1_cls: top1_cls(&records)?,
            px_ap: px_ap_with_mode(&pixel_evals, &grid, pxap_mode)?,
            mean_s_selected: run.mean_s_selected,
        },
        pr_curve: PrCurve { thresholds: grid, precision, recall },
    };
    let mut f = fs::File::create(run_dir.join("report.json"))?;
    f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(report)
}

/// Export thresholded maps and boxes for any split using the selected
/// checkpoint, into `maps-<split>/` and `boxes-<split>.csv`.
pub fn export_maps(run_dir: &Path, split: Split) -> anyhow::Result<PathBuf> {
    let run = load_selected_generator(run_dir)?;
    let cfg = &run.cfg;
    let samples = load(&cfg.dataset_root, split)?;
    let views = eval_views(&samples)?;
    let maps = generator_maps(&run.generator, &views)?;
    let out = run_dir.join(format!("maps-{split}"));
    fs::create_dir_all(&out)?;
    let seed_comment = format!("seed={}", cfg.seed);
    let mut box_rows = Vec::with_capacity(views.len());
    for (view, map) in views.iter().zip(&maps) {
        let ext = extract_box(map);
        imgio::write_pgm(
            &out.join(format!("{}.pgm", view.id)),
            map.h,
            map.w,
            ext.thresholded.values(),
            Some(&seed_comment),
        )?;
        box_rows.push((view.id.clone(), ext.bbox, ext.degenerate));
    }
    write_boxes_csv(&run_dir.join(format!("boxes-{split}.csv")), cfg.seed, &box_rows)?;
    Ok(out)
}

/// Classifier softmax probabilities for eval views; used by in-crate tests.
#[allow(dead_code)]
pub fn classifier_probabilities(
    net: &Classifier,
    views: &[Sample],
) -> anyhow::Result<Vec<Vec<f64>>> {
    without_recording(net, || {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let logits = net.forward(&Tape::new(), &to_image_tensor(&refs), Mode::Eval)?;
            let probs = softmax_rows(&logits.to_vec(), refs.len(), net.num_classes);
            for row in 0..refs.len() {
                out.push(probs[row * net.num_classes..(row + 1) * net.num_classes].to_vec());
            }
        }
        Ok(out)
    })
}
