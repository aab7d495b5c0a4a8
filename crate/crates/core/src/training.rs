//! Detector training: soft-label loss, batching, feature interpolation,
//! constrained dropout and early stopping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    extract_artifact, ArtifactEncoder, ArtifactEncoderConfig, BackendChoice, EncoderGrads, EncoderMoments,
    EncoderTrace, PatchAutoencoder, StoredBackend,
};
use crate::augment::{apply_transform, preprocess_input, sample_train_augmentation, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::fusion::{sample_dropout_mask, DropoutMode, DropoutPolicy, FusionMode, FusionMoments, FusionNetwork, Mask};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{accuracy, average_precision};
use crate::model::{build_backbone, BackboneChoice, Detector};
use crate::nn::{sigmoid, Adam};
use crate::semantic::{plan_interpolation, Replacement};

/// Probability clamp used by [`soft_bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross entropy against soft targets, with scores clamped to
/// `[eps, 1 - eps]`.
pub fn soft_bce_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::DimensionMismatch(scores.len(), targets.len()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Loss and `dL/dz` for a single logit `z`. The gradient is zero where the
/// clamp is active.
pub fn soft_bce_from_logit(z: f64, t: f64) -> (f64, f64) {
    let s = sigmoid(z);
    let c = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(t * c.ln() + (1.0 - t) * (1.0 - c).ln());
    let grad = if c == s { s - t } else { 0.0 };
    (loss, grad)
}

/// Settings for fitting the patch autoencoder backend on real images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendFit {
    pub patch: usize,
    pub latent: usize,
    /// Number of real training images sampled for the fit.
    pub images: usize,
    pub max_patches: usize,
}

impl Default for BackendFit {
    fn default() -> Self {
        Self {
            patch: 8,
            latent: 16,
            images: 64,
            max_patches: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each batch replaced by interpolated samples.
    pub interpolation_rate: f64,
    pub augmentation: AugmentationPolicy,
    pub dropout: DropoutPolicy,
    pub mode: FusionMode,
    pub seed: u64,
    /// Stop after this many epochs without a validation AP improvement.
    pub patience: Option<usize>,
    /// Build batches with a proportional mix of both classes.
    pub stratified_batches: bool,
    pub workers: usize,
    pub encoder: ArtifactEncoderConfig,
    pub backend: BackendChoice,
    pub backend_fit: BackendFit,
    pub backbone: BackboneChoice,
    pub normalize_embeddings: bool,
    /// JSON-lines training log.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            interpolation_rate: 0.5,
            augmentation: AugmentationPolicy::default(),
            dropout: DropoutPolicy::default(),
            mode: FusionMode::Adaptive,
            seed: 0,
            patience: Some(3),
            stratified_batches: true,
            workers: default_workers(),
            encoder: ArtifactEncoderConfig::default(),
            backend: BackendChoice::default(),
            backend_fit: BackendFit::default(),
            backbone: BackboneChoice::default(),
            normalize_embeddings: false,
            log_path: None,
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.interpolation_rate) {
            return Err(Error::Config(format!(
                "interpolation rate {} outside [0, 1]",
                self.interpolation_rate
            )));
        }
        self.augmentation.validate()?;
        self.dropout.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of training positions replaced by interpolated samples.
    pub interpolated_fraction: f64,
    /// Batches where interpolation was skipped for lack of one class.
    pub single_class_batches: usize,
    pub val_ap: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_ap: Option<f64>,
    pub stopped_early: bool,
    pub backbone_checksum: String,
    pub backbone_unchanged: bool,
    pub seconds: f64,
}

/// splitmix64 over the parts, so per-sample streams are independent of
/// scheduling.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_SAMPLE: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_INIT: u64 = 4;

/// Splits `items` (with labels) into batches. Stratified batching shuffles
/// each class separately and deals them out so every batch carries the
/// global class ratio as closely as possible.
pub fn make_batches(items: &[(usize, bool)], batch_size: usize, stratified: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let order: Vec<usize> = if stratified {
        let mut pos: Vec<usize> = items.iter().filter(|i| i.1).map(|i| i.0).collect();
        let mut neg: Vec<usize> = items.iter().filter(|i| !i.1).map(|i| i.0).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        // Merge by fractional rank so both classes are spread evenly.
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(items.len());
        for (list, offset) in [(&pos, 0.25), (&neg, 0.75)] {
            let n = list.len() as f64;
            keyed.extend(list.iter().enumerate().map(|(r, &i)| ((r as f64 + offset) / n, i)));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        keyed.into_iter().map(|k| k.1).collect()
    } else {
        let mut all: Vec<usize> = items.iter().map(|i| i.0).collect();
        all.shuffle(rng);
        all
    };
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

struct SampleOut {
    v_sem: Vec<f64>,
    v_art: Vec<f64>,
    trace: Option<EncoderTrace>,
}

fn sample_features(
    det: &Detector,
    manifest: &DatasetManifest,
    index: usize,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<SampleOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = manifest.load_image(&manifest.records[index])?;
    if let Some(spec) = sample_train_augmentation(policy, &mut rng) {
        img = apply_transform(&img, &spec, &mut rng)?;
    }
    let x = preprocess_input(&img)?;
    let v_sem = det.semantic_features(&x)?;
    let (v_art, trace) = if det.mode().uses_artifact() {
        let (v, t) = det.encoder.forward(&extract_artifact(&x, det.reconstruction_backend())?)?;
        (v, Some(t))
    } else {
        (Vec::new(), None)
    };
    Ok(SampleOut { v_sem, v_art, trace })
}

fn mix(a: &[f64], b: &[f64], delta: f64) -> Vec<f64> {
    if delta == 0.0 {
        return a.to_vec();
    }
    if delta == 1.0 {
        return b.to_vec();
    }
    a.iter().zip(b).map(|(x, y)| (1.0 - delta) * x + delta * y).collect()
}

fn add_grads(acc: &mut EncoderGrads, g: &EncoderGrads) {
    acc.stem.weight += &g.stem.weight;
    acc.stem.bias += &g.stem.bias;
    acc.conv_a.weight += &g.conv_a.weight;
    acc.conv_a.bias += &g.conv_a.bias;
    acc.conv_b.weight += &g.conv_b.weight;
    acc.conv_b.bias += &g.conv_b.bias;
    acc.fc_weight += &g.fc_weight;
    acc.fc_bias += &g.fc_bias;
}

/// Scores every record of `split`, in manifest order.
pub(crate) fn score_split(det: &Detector, manifest: &DatasetManifest, split: Split) -> Result<(Vec<bool>, Vec<f64>)> {
    let items: Vec<(usize, bool)> = manifest
        .in_split(split)
        .map(|(i, r)| (i, r.is_synthetic()))
        .collect();
    let scores = items
        .par_iter()
        .map(|&(i, _)| det.predict_score(&manifest.load_image(&manifest.records[i])?))
        .collect::<Result<Vec<f64>>>()?;
    Ok((items.into_iter().map(|i| i.1).collect(), scores))
}

fn fit_backend(manifest: &DatasetManifest, train: &[(usize, bool)], cfg: &TrainConfig) -> Result<StoredBackend> {
    if !cfg.mode.uses_artifact() {
        return Ok(StoredBackend::Identity);
    }
    match &cfg.backend {
        BackendChoice::Identity => Ok(StoredBackend::Identity),
        BackendChoice::External(path) => Ok(StoredBackend::Patch(PatchAutoencoder::load(std::path::Path::new(path))?)),
        BackendChoice::Toy => {
            let mut reals: Vec<usize> = train.iter().filter(|t| !t.1).map(|t| t.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_INIT, 1]));
            reals.shuffle(&mut rng);
            reals.truncate(cfg.backend_fit.images.max(1));
            let images = reals
                .par_iter()
                .map(|&i| preprocess_input(&manifest.load_image(&manifest.records[i])?))
                .collect::<Result<Vec<_>>>()?;
            let f = cfg.backend_fit;
            Ok(StoredBackend::Patch(PatchAutoencoder::fit(
                &images,
                f.patch,
                f.latent,
                f.max_patches,
                derive_seed(&[cfg.seed, TAG_INIT, 2]),
            )?))
        }
    }
}

/// Trains a detector on the train split, early-stopping on validation AP
/// when a validation split with both classes exists.
pub fn train_detector(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(Detector, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| train_inner(manifest, cfg, start))
}

fn train_inner(manifest: &DatasetManifest, cfg: &TrainConfig, start: Instant) -> Result<(Detector, TrainReport)> {
    let train: Vec<(usize, bool)> = manifest
        .in_split(Split::Train)
        .map(|(i, r)| (i, r.is_synthetic()))
        .collect();
    let (reals, synths) = manifest.label_counts(Split::Train);
    if reals == 0 || synths == 0 {
        return Err(Error::SingleClass(format!(
            "train split needs both classes (real: {reals}, synthetic: {synths})"
        )));
    }
    let (val_reals, val_synths) = manifest.label_counts(Split::Val);
    let has_val = val_reals > 0 && val_synths > 0;
    if !has_val {
        warn!("validation split lacks a class; early stopping disabled");
    }

    let backbone = build_backbone(&cfg.backbone, cfg.normalize_embeddings)?;
    let backbone_checksum = backbone.checksum();
    let backend = fit_backend(manifest, &train, cfg)?;
    let encoder = ArtifactEncoder::new(cfg.encoder, derive_seed(&[cfg.seed, TAG_INIT, 3]));
    let fusion = FusionNetwork::new(cfg.mode, backbone.dim(), encoder.dim(), derive_seed(&[cfg.seed, TAG_INIT, 4]));
    let mut det = Detector::new(Arc::clone(&backbone), backend, encoder, fusion)?;
    info!(
        "training {} on {} images ({reals} real / {synths} synthetic), backbone {}",
        cfg.mode,
        train.len(),
        backbone.id()
    );

    let mut log = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?,
        )),
        None => None,
    };

    let mut opt = Adam::new(cfg.learning_rate);
    let mut fusion_m = FusionMoments::default();
    let mut enc_m = EncoderMoments::default();
    let mut history = Vec::new();
    // Checkpoint selection key: validation AP, ties broken by accuracy at 0.5
    // (AP saturates on easy data long before the threshold is calibrated).
    let mut best: Option<((f64, f64), usize, ArtifactEncoder, FusionNetwork)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    // Interpolation mixes semantic embeddings; the artifact-only model has
    // none, so it trains on hard labels.
    let interp_rate = if cfg.mode.uses_semantic() { cfg.interpolation_rate } else { 0.0 };
    let dropout = if cfg.mode == FusionMode::Adaptive {
        cfg.dropout
    } else {
        DropoutPolicy {
            mode: DropoutMode::Inference,
            ..cfg.dropout
        }
    };
    let policy_seed = cfg.augmentation.seed;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_ORDER, epoch as u64]));
        let batches = make_batches(&train, cfg.batch_size, cfg.stratified_batches, &mut order_rng);
        let (mut loss_sum, mut positions, mut replaced, mut single_class) = (0.0, 0usize, 0usize, 0usize);

        for (b, batch) in batches.iter().enumerate() {
            let outs = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(&[cfg.seed, policy_seed, TAG_SAMPLE, epoch as u64, i as u64]);
                    sample_features(&det, manifest, i, &cfg.augmentation, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<f64> = batch
                .iter()
                .map(|&i| if manifest.records[i].is_synthetic() { 1.0 } else { 0.0 })
                .collect();

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_BATCH, epoch as u64, b as u64]));
            let (plan, single) = plan_interpolation(&labels, interp_rate, &mut rng)?;
            single_class += usize::from(single);
            replaced += plan.len();
            let mut replacement: Vec<Option<Replacement>> = vec![None; batch.len()];
            for r in plan {
                replacement[r.position] = Some(r);
            }

            let n = batch.len() as f64;
            let mut fgrads = det.fusion.zero_grads();
            let mut art_grads: Vec<Vec<f64>> = vec![vec![0.0; det.fusion.dim_art]; batch.len()];
            for p in 0..batch.len() {
                let (v_sem, v_art, target) = match replacement[p] {
                    Some(r) => (
                        mix(&outs[r.real].v_sem, &outs[r.synth].v_sem, r.delta),
                        mix(&outs[r.real].v_art, &outs[r.synth].v_art, r.delta),
                        r.delta,
                    ),
                    None => (outs[p].v_sem.clone(), outs[p].v_art.clone(), labels[p]),
                };
                let mask: Mask = sample_dropout_mask(&dropout, &mut rng);
                let trace = det.fusion.forward(&v_sem, &v_art, mask)?;
                let (loss, d) = soft_bce_from_logit(trace.logit, target);
                loss_sum += loss;
                let dv_art = det.fusion.backward(&v_sem, &v_art, &trace, d / n, &mut fgrads);
                if dv_art.is_empty() {
                    continue;
                }
                let mut route = |k: usize, w: f64| {
                    if w != 0.0 {
                        for (acc, g) in art_grads[k].iter_mut().zip(&dv_art) {
                            *acc += w * g;
                        }
                    }
                };
                match replacement[p] {
                    Some(r) => {
                        route(r.real, 1.0 - r.delta);
                        route(r.synth, r.delta);
                    }
                    None => route(p, 1.0),
                }
            }
            positions += batch.len();

            opt.begin_step();
            if det.mode().uses_artifact() {
                let per_sample: Vec<EncoderGrads> = outs
                    .par_iter()
                    .zip(art_grads.par_iter())
                    .map(|(o, g)| {
                        let mut eg = det.encoder.zero_grads();
                        if let Some(t) = &o.trace {
                            if g.iter().any(|&v| v != 0.0) {
                                det.encoder.backward(t, g, &mut eg);
                            }
                        }
                        eg
                    })
                    .collect();
                // Sum in batch order so results do not depend on scheduling.
                let mut total = det.encoder.zero_grads();
                for g in &per_sample {
                    add_grads(&mut total, g);
                }
                det.encoder.apply_adam(&opt, &total, 1.0, &mut enc_m);
            }
            det.fusion.apply_adam(&opt, &fgrads, 1.0, &mut fusion_m);
        }

        let (val_ap, val_accuracy) = if has_val {
            let (labels, scores) = score_split(&det, manifest, Split::Val)?;
            (
                Some(average_precision(&labels, &scores)?),
                Some(accuracy(&labels, &scores, 0.5)?),
            )
        } else {
            (None, None)
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / positions.max(1) as f64,
            interpolated_fraction: replaced as f64 / positions.max(1) as f64,
            single_class_batches: single_class,
            val_ap,
            val_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4} val_ap {:?} val_acc {:?} ({:.1}s)",
            entry.train_loss, entry.val_ap, entry.val_accuracy, entry.seconds
        );
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            writeln!(w).map_err(|e| Error::io("writing training log", e))?;
            w.flush().map_err(|e| Error::io("writing training log", e))?;
        }
        history.push(entry);

        if let (Some(ap), Some(acc)) = (val_ap, val_accuracy) {
            let key = (ap, acc);
            let improved = best.as_ref().map_or(true, |b| key > b.0);
            if improved {
                best = Some((key, epoch, det.encoder.clone(), det.fusion.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    stopped_early = epoch + 1 < cfg.epochs;
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_ap) = match best {
        Some(((ap, _), epoch, enc, fus)) => {
            det.encoder = enc;
            det.fusion = fus;
            (epoch, Some(ap))
        }
        None => (history.len().saturating_sub(1), None),
    };
    let backbone_unchanged = det.backbone.checksum() == backbone_checksum;
    Ok((
        det,
        TrainReport {
            history,
            best_epoch,
            best_val_ap,
            stopped_early,
            backbone_checksum,
            backbone_unchanged,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

pub use crate::model::{load_checkpoint, save_checkpoint};
