//! Small shared setup for the examples: a toy corpus in a temp dir.

#![allow(dead_code)]

use std::path::PathBuf;

use synthdetect::manifest::{build_manifest, split_manifest, DatasetManifest, SplitFractions};
use synthdetect::toy::{generate_toy_corpus, ToyCorpusConfig};
use synthdetect::{train_detector, Detector, TrainConfig};
use tempfile::TempDir;

pub struct Toy {
    pub dir: TempDir,
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
}

/// `n` real and `n` synthetic toy images, split 60/20/20.
pub fn toy_corpus(n: usize, size: usize) -> synthdetect::Result<Toy> {
    let dir = tempfile::tempdir().map_err(|e| synthdetect::Error::io("creating temp dir", e))?;
    let root = dir.path().join("corpus");
    let cfg = ToyCorpusConfig {
        n_real: n,
        n_synthetic: n,
        size,
        ..Default::default()
    };
    let corpus = generate_toy_corpus(&root, &cfg)?;
    let (manifest, _) = build_manifest(&root, &corpus.rule)?;
    let manifest = split_manifest(&manifest, SplitFractions::new(0.6, 0.2, 0.2)?, 0)?;
    let manifest_path = dir.path().join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(Toy {
        dir,
        manifest,
        manifest_path,
    })
}

/// A short training run, good enough to give the examples something to score.
pub fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 8,
        learning_rate: 3e-3,
        patience: None,
        ..Default::default()
    }
}

pub fn quick_detector(toy: &Toy) -> synthdetect::Result<Detector> {
    let (det, report) = train_detector(&toy.manifest, &quick_config())?;
    println!(
        "trained {} epochs, best val AP {:?}",
        report.history.len(),
        report.best_val_ap
    );
    Ok(det)
}
