//! Fusion ablation: adaptive fusion against single-branch detectors and
//! simple score/feature combinations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{score_records, EvalOptions, MetricsRow};
use crate::fusion::{ablation_fuse, AblationMode, BranchInputs, FusionMode};
use crate::manifest::{DatasetManifest, Split};
use crate::training::{train_detector, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `adaptive` or an [`AblationMode`] name.
    pub method: String,
    #[serde(flatten)]
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub training: Vec<(FusionMode, TrainReport)>,
}

impl AblationReport {
    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(FlatRow::from(row))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

// The csv crate cannot serialize flattened structs, so spell the columns out.
#[derive(Serialize)]
struct FlatRow<'a> {
    method: &'a str,
    n_real: usize,
    n_synthetic: usize,
    ap: Option<f64>,
    auc: Option<f64>,
    accuracy: Option<f64>,
    real_accuracy: Option<f64>,
    synthetic_accuracy: Option<f64>,
    f1: Option<f64>,
    tpr_at_10_fpr: Option<f64>,
    tpr_at_1_fpr: Option<f64>,
}

impl<'a> From<&'a AblationRow> for FlatRow<'a> {
    fn from(r: &'a AblationRow) -> Self {
        let m = &r.metrics;
        Self {
            method: &r.method,
            n_real: m.n_real,
            n_synthetic: m.n_synthetic,
            ap: m.ap,
            auc: m.auc,
            accuracy: m.accuracy,
            real_accuracy: m.real_accuracy,
            synthetic_accuracy: m.synthetic_accuracy,
            f1: m.f1,
            tpr_at_10_fpr: m.tpr_at_10_fpr,
            tpr_at_1_fpr: m.tpr_at_1_fpr,
        }
    }
}

/// Trains the adaptive, semantic-only, artifact-only and plain-concatenation
/// detectors with `cfg` (overriding only the mode), scores `split` under
/// `eval`, and reports adaptive fusion next to all six ablation modes.
/// Average, max and min combine the two single-branch scores.
pub fn run_ablation(manifest: &DatasetManifest, cfg: &TrainConfig, split: Split, eval: &EvalOptions) -> Result<AblationReport> {
    let modes = [
        FusionMode::Adaptive,
        FusionMode::OnlySemantic,
        FusionMode::OnlyArtifact,
        FusionMode::SimpleConcat,
    ];
    let mut scores = Vec::new();
    let mut training = Vec::new();
    let mut labels = Vec::new();
    for mode in modes {
        let (det, report) = train_detector(manifest, &TrainConfig { mode, ..cfg.clone() })?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let scored = pool.install(|| score_records(manifest, split, &det, eval))?;
        labels = scored.iter().map(|r| r.synthetic).collect();
        scores.push(scored.into_iter().map(|r| r.score).collect::<Vec<f64>>());
        training.push((mode, report));
    }
    let (adaptive, sem, art, concat) = (&scores[0], &scores[1], &scores[2], &scores[3]);

    let row = |method: &str, s: &[f64]| AblationRow {
        method: method.to_string(),
        metrics: MetricsRow::compute(method, &labels, s, eval.threshold),
    };
    let mut rows = vec![row("adaptive", adaptive)];
    for mode in AblationMode::ALL {
        let combined = match mode {
            AblationMode::SimpleConcat => concat.clone(),
            _ => sem
                .iter()
                .zip(art)
                .map(|(&s, &a)| {
                    ablation_fuse(
                        mode,
                        &BranchInputs {
                            sem_score: Some(s),
                            art_score: Some(a),
                            concat: None,
                        },
                    )
                })
                .collect::<Result<Vec<f64>>>()?,
        };
        rows.push(row(mode.name(), &combined));
    }
    Ok(AblationReport { rows, training })
}
