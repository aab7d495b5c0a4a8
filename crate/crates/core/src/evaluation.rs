//! Per-source metric reports and robustness sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform_with, TransformKind, TransformOptions, TransformSpec};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{accuracy, average_precision, class_accuracy, f1_score, roc_auc, tpr_at_fpr};
use crate::model::Scorer;
use crate::raster::Image;
use crate::training::derive_seed;

/// Metrics for one pool of images. Undefined metrics (for example AUC on a
/// single class) are `None` and serialize as `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub source: String,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub real_accuracy: Option<f64>,
    pub synthetic_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub tpr_at_10_fpr: Option<f64>,
    pub tpr_at_1_fpr: Option<f64>,
}

impl MetricsRow {
    pub fn compute(source: &str, labels: &[bool], scores: &[f64], threshold: f64) -> Self {
        let n_synthetic = labels.iter().filter(|&&l| l).count();
        Self {
            source: source.to_string(),
            n_real: labels.len() - n_synthetic,
            n_synthetic,
            ap: average_precision(labels, scores).ok(),
            auc: roc_auc(labels, scores).ok(),
            accuracy: accuracy(labels, scores, threshold).ok(),
            real_accuracy: class_accuracy(labels, scores, threshold, false).ok().flatten(),
            synthetic_accuracy: class_accuracy(labels, scores, threshold, true).ok().flatten(),
            f1: f1_score(labels, scores, threshold).ok(),
            tpr_at_10_fpr: tpr_at_fpr(labels, scores, 0.10).ok(),
            tpr_at_1_fpr: tpr_at_fpr(labels, scores, 0.01).ok(),
        }
    }

    fn values(&self) -> [Option<f64>; 8] {
        [
            self.ap,
            self.auc,
            self.accuracy,
            self.real_accuracy,
            self.synthetic_accuracy,
            self.f1,
            self.tpr_at_10_fpr,
            self.tpr_at_1_fpr,
        ]
    }

    fn set_values(&mut self, v: [Option<f64>; 8]) {
        [
            self.ap,
            self.auc,
            self.accuracy,
            self.real_accuracy,
            self.synthetic_accuracy,
            self.f1,
            self.tpr_at_10_fpr,
            self.tpr_at_1_fpr,
        ] = v;
    }
}

/// One scored manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub index: usize,
    pub synthetic: bool,
    pub source: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub threshold: f64,
    /// Applied to every image before scoring, if any.
    pub transform: Option<EvalTransform>,
    /// Seed of the per-image transform draws.
    #[serde(default)]
    pub seed: u64,
    /// One row per synthetic source, each pooled with all real images.
    pub per_source: Vec<MetricsRow>,
    /// Unweighted mean of the per-source rows, metric by metric, over the
    /// rows where the metric is defined.
    pub average: MetricsRow,
    /// All images pooled.
    pub overall: MetricsRow,
}

/// Corruption applied to evaluation images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTransform {
    Fixed(TransformSpec),
    /// JPEG at a quality drawn uniformly from `lo..=hi`, one seeded draw per
    /// image.
    RandomJpeg { lo: u8, hi: u8 },
}

impl From<TransformSpec> for EvalTransform {
    fn from(spec: TransformSpec) -> Self {
        EvalTransform::Fixed(spec)
    }
}

impl EvalTransform {
    fn apply(&self, img: &Image, options: TransformOptions, rng: &mut ChaCha8Rng) -> Result<Image> {
        match *self {
            EvalTransform::Fixed(spec) => apply_transform_with(img, &spec, options, rng),
            EvalTransform::RandomJpeg { lo, hi } => {
                let q = rng.gen_range(lo..=hi);
                apply_transform_with(img, &TransformSpec::jpeg(q), options, rng)
            }
        }
    }
}

impl fmt::Display for EvalTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalTransform::Fixed(spec) => spec.fmt(f),
            EvalTransform::RandomJpeg { lo, hi } => write!(f, "jpeg:{lo}-{hi}"),
        }
    }
}

impl FromStr for EvalTransform {
    type Err = Error;

    /// `kind:param`, or `jpeg:lo-hi` for a random quality per image.
    fn from_str(s: &str) -> Result<Self> {
        if let Some((lo, hi)) = s.strip_prefix("jpeg:").and_then(|r| r.split_once('-')) {
            let bad = || Error::InvalidTransform(format!("bad JPEG range in `{s}`"));
            let lo: u8 = lo.trim().parse().map_err(|_| bad())?;
            let hi: u8 = hi.trim().parse().map_err(|_| bad())?;
            if lo == 0 || lo > hi || hi > 100 {
                return Err(bad());
            }
            return Ok(EvalTransform::RandomJpeg { lo, hi });
        }
        Ok(EvalTransform::Fixed(s.parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub transform: Option<EvalTransform>,
    pub transform_options: TransformOptions,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            transform: None,
            transform_options: TransformOptions::default(),
            seed: 0,
        }
    }
}

/// Scores every record of `split`, applying the optional transform first.
/// Each record's noise stream depends only on `seed` and its index.
pub fn score_records(
    manifest: &DatasetManifest,
    split: Split,
    scorer: &dyn Scorer,
    opts: &EvalOptions,
) -> Result<Vec<ScoredRecord>> {
    let items: Vec<usize> = manifest.in_split(split).map(|(i, _)| i).collect();
    items
        .par_iter()
        .map(|&i| {
            let rec = &manifest.records[i];
            let mut img = manifest.load_image(rec)?;
            if let Some(t) = &opts.transform {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, i as u64]));
                img = t.apply(&img, opts.transform_options, &mut rng)?;
            }
            Ok(ScoredRecord {
                index: i,
                synthetic: rec.is_synthetic(),
                source: rec.source.clone(),
                score: scorer.score(&img)?,
            })
        })
        .collect()
}

/// Builds the per-source report from scored records.
pub fn report_from_scores(scored: &[ScoredRecord], split: Split, threshold: f64) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(Error::EmptyInput);
    }
    let reals: Vec<&ScoredRecord> = scored.iter().filter(|r| !r.synthetic).collect();
    let mut by_source: BTreeMap<&str, Vec<&ScoredRecord>> = BTreeMap::new();
    for r in scored.iter().filter(|r| r.synthetic) {
        by_source.entry(r.source.as_str()).or_default().push(r);
    }
    let row_for = |name: &str, recs: &[&ScoredRecord]| {
        let labels: Vec<bool> = recs.iter().map(|r| r.synthetic).collect();
        let scores: Vec<f64> = recs.iter().map(|r| r.score).collect();
        MetricsRow::compute(name, &labels, &scores, threshold)
    };
    let per_source: Vec<MetricsRow> = by_source
        .iter()
        .map(|(name, synth)| {
            let pool: Vec<&ScoredRecord> = reals.iter().chain(synth.iter()).copied().collect();
            row_for(name, &pool)
        })
        .collect();

    let mut average = MetricsRow {
        source: "average".into(),
        n_real: reals.len(),
        n_synthetic: per_source.iter().map(|r| r.n_synthetic).sum(),
        ..Default::default()
    };
    let mut sums = [(0.0, 0usize); 8];
    for row in &per_source {
        for (acc, v) in sums.iter_mut().zip(row.values()) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    average.set_values(sums.map(|(s, n)| (n > 0).then(|| s / n as f64)));

    let all: Vec<&ScoredRecord> = scored.iter().collect();
    Ok(MetricsReport {
        split,
        threshold,
        transform: None,
        seed: 0,
        per_source,
        average,
        overall: row_for("overall", &all),
    })
}

/// Scores a split and reports metrics per synthetic source.
pub fn evaluate_report(
    manifest: &DatasetManifest,
    split: Split,
    scorer: &dyn Scorer,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let scored = score_records(manifest, split, scorer, opts)?;
    let mut report = report_from_scores(&scored, split, opts.threshold)?;
    report.transform = opts.transform;
    report.seed = opts.seed;
    Ok(report)
}

impl MetricsReport {
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.per_source.iter().chain([&self.average, &self.overall])
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// One CSV row per source plus `average` and `overall`; undefined
    /// metrics are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// `n` evenly spaced values from `start` to `end` inclusive. JPEG qualities
/// are rounded to integers.
pub fn parameter_grid(kind: TransformKind, start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("grid needs at least one point".into()));
    }
    let (lo, hi) = kind.benchmark_range();
    for v in [start, end] {
        if !(lo..=hi).contains(&v) {
            return Err(Error::OutOfRange(format!("{kind} parameter {v} outside [{lo}, {hi}]")));
        }
    }
    let step = if n == 1 { 0.0 } else { (end - start) / (n - 1) as f64 };
    Ok((0..n)
        .map(|i| {
            let v = if i + 1 == n && n > 1 { end } else { start + step * i as f64 };
            if kind == TransformKind::Jpeg {
                v.round()
            } else {
                v
            }
        })
        .collect())
}

/// Parses `start:end:n` into a grid for `kind`.
pub fn parse_grid(kind: TransformKind, text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("grid `{text}` is not `start:end:n`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    parameter_grid(kind, start, end, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub kind: TransformKind,
    pub param: f64,
    /// The untransformed reference point.
    pub identity: bool,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Prepend the untransformed reference point.
    pub include_identity: bool,
    pub threshold: f64,
    pub transform_options: TransformOptions,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            include_identity: false,
            threshold: 0.5,
            transform_options: TransformOptions::default(),
            seed: 0,
        }
    }
}

/// Evaluates `scorer` on `split` once per grid value of `kind`; emits exactly
/// `grid.len()` points (plus the identity point when requested).
pub fn robustness_sweep(
    manifest: &DatasetManifest,
    split: Split,
    scorer: &dyn Scorer,
    kind: TransformKind,
    grid: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<RobustnessPoint>> {
    let (lo, hi) = kind.benchmark_range();
    let specs = grid
        .iter()
        .map(|&p| {
            if !(lo..=hi).contains(&p) {
                return Err(Error::OutOfRange(format!("{kind} parameter {p} outside [{lo}, {hi}]")));
            }
            TransformSpec::new(kind, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(grid.len() + 1);
    let mut run = |transform: Option<TransformSpec>, param: f64, k: u64| -> Result<()> {
        let eval = EvalOptions {
            threshold: opts.threshold,
            transform: transform.map(EvalTransform::from),
            transform_options: opts.transform_options,
            seed: derive_seed(&[opts.seed, k]),
        };
        let scored = score_records(manifest, split, scorer, &eval)?;
        let labels: Vec<bool> = scored.iter().map(|r| r.synthetic).collect();
        let scores: Vec<f64> = scored.iter().map(|r| r.score).collect();
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        points.push(RobustnessPoint {
            kind,
            param,
            identity: transform.is_none(),
            ap: average_precision(&labels, &scores).ok(),
            auc: roc_auc(&labels, &scores).ok(),
            accuracy: accuracy(&labels, &scores, opts.threshold).ok(),
        });
        Ok(())
    };
    if opts.include_identity {
        run(None, kind.identity_param(), u64::MAX)?;
    }
    for (k, spec) in specs.into_iter().enumerate() {
        run(Some(spec), spec.param, k as u64)?;
    }
    Ok(points)
}

pub fn write_robustness_csv(points: &[RobustnessPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, synthetic: bool, source: &str, score: f64) -> ScoredRecord {
        ScoredRecord {
            index: i,
            synthetic,
            source: source.into(),
            score,
        }
    }

    #[test]
    fn per_source_rows_pool_all_reals() {
        let scored = vec![
            rec(0, false, "photos", 0.1),
            rec(1, false, "photos", 0.6),
            rec(2, true, "gen-a", 0.9),
            rec(3, true, "gen-a", 0.8),
            rec(4, true, "gen-b", 0.2),
        ];
        let r = report_from_scores(&scored, Split::Test, 0.5).unwrap();
        assert_eq!(r.per_source.len(), 2);
        let a = &r.per_source[0];
        assert_eq!((a.source.as_str(), a.n_real, a.n_synthetic), ("gen-a", 2, 2));
        assert_eq!(a.auc, Some(1.0));
        assert_eq!(a.accuracy, Some(0.75));
        let b = &r.per_source[1];
        assert_eq!(b.auc, Some(0.5));
        assert_eq!(r.average.auc, Some(0.75));
        assert_eq!(r.overall.n_real + r.overall.n_synthetic, 5);
    }

    #[test]
    fn single_class_metrics_are_null() {
        let scored = vec![rec(0, true, "gen", 0.9), rec(1, true, "gen", 0.4)];
        let r = report_from_scores(&scored, Split::Test, 0.5).unwrap();
        let row = &r.per_source[0];
        assert_eq!(row.auc, None);
        assert_eq!(row.tpr_at_1_fpr, None);
        assert_eq!(row.real_accuracy, None);
        assert_eq!(row.ap, Some(1.0));
        assert_eq!(row.accuracy, Some(0.5));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_source"][0]["auc"].is_null());
    }

    #[test]
    fn grid_endpoints_and_validation() {
        assert_eq!(parameter_grid(TransformKind::Jpeg, 75.0, 95.0, 5).unwrap(), vec![75.0, 80.0, 85.0, 90.0, 95.0]);
        assert_eq!(parameter_grid(TransformKind::Blur, 0.5, 2.5, 1).unwrap(), vec![0.5]);
        let g = parameter_grid(TransformKind::Noise, 0.05, 0.25, 7).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(*g.last().unwrap(), 0.25);
        assert!(matches!(parameter_grid(TransformKind::Jpeg, 50.0, 95.0, 3), Err(Error::OutOfRange(_))));
        assert!(parse_grid(TransformKind::Resize, "128:640:5").is_ok());
        assert!(parse_grid(TransformKind::Resize, "128-640").is_err());
    }

    #[test]
    fn eval_transform_parsing() {
        assert_eq!("jpeg:75-95".parse::<EvalTransform>().unwrap(), EvalTransform::RandomJpeg { lo: 75, hi: 95 });
        assert_eq!(
            "blur:1.5".parse::<EvalTransform>().unwrap(),
            EvalTransform::Fixed(TransformSpec::new(TransformKind::Blur, 1.5).unwrap())
        );
        for bad in ["jpeg:95-75", "jpeg:0-50", "jpeg:80-101", "blur:1-2"] {
            assert!(bad.parse::<EvalTransform>().is_err(), "{bad}");
        }
        let t = EvalTransform::RandomJpeg { lo: 75, hi: 95 };
        assert_eq!(t.to_string().parse::<EvalTransform>().unwrap(), t);
    }

    #[test]
    fn random_jpeg_draw_is_seeded() {
        let img = Image::from_fn(16, 16, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0).unwrap();
        let t = EvalTransform::RandomJpeg { lo: 75, hi: 95 };
        let run = |seed| t.apply(&img, TransformOptions::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(3), run(3));
    }
}
