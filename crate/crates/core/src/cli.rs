//! Command-line entry point. [`run`] parses arguments, dispatches a
//! subcommand and reports the files it wrote.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use plotters::prelude::*;
use serde::Serialize;

use crate::ablation::run_ablation;
use crate::artifact::BackendChoice;
use crate::augment::{TransformKind, TransformOptions, ResizeMode};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_report, parse_grid, robustness_sweep, write_robustness_csv, EvalOptions, EvalTransform, SweepOptions};
use crate::freq::{mean_spectrum, spectrum_gap_report, write_matrix_csv, read_matrix_csv, write_matrix_png, DenoiseMode, SpectrumOptions, SpectrumScale};
use crate::fusion::FusionMode;
use crate::manifest::{
    build_manifest, parse_label_rule, split_manifest, validate_manifest, DatasetManifest, LabelingRule, Split,
    SplitFractions, ValidationProfile,
};
use crate::model::{load_checkpoint, save_checkpoint, CACHE_ENV};
use crate::raster::Image;
use crate::toy::{generate_toy_corpus, ToyCorpusConfig};
use crate::training::{train_detector, TrainConfig};

/// Outcome of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    /// 0 ok, 1 runtime error, 2 usage error.
    pub exit_code: i32,
    pub artifacts_written: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug, Parser)]
#[command(name = "synthdetect", version, about = "Detect AI-generated images by fusing semantic and artifact features")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan an image tree into a manifest and assign splits.
    Manifest(ManifestArgs),
    /// Train a detector on a manifest's train split.
    Train(TrainArgs),
    /// Score images, one JSON record per image on stdout.
    Predict(PredictArgs),
    /// Per-source metrics on a manifest split.
    Eval(EvalArgs),
    /// Metric curve over a transform parameter grid.
    Robustness(RobustnessArgs),
    /// Average frequency spectra of real and synthetic images.
    Freq(FreqArgs),
    /// Render robustness curves (SVG) or spectrum matrices (PNG).
    Plot(PlotArgs),
    /// Train every fusion variant and compare them.
    Ablation(AblationArgs),
    /// Write the synthetic toy corpus.
    ToyCorpus(ToyArgs),
}

#[derive(Debug, Args)]
struct ManifestArgs {
    /// Corpus root.
    #[arg(long)]
    root: PathBuf,
    /// `subdir=label:source`, repeatable (label 0 = real, 1 = synthetic).
    #[arg(long = "rule", required = true)]
    rules: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    /// Validation profile: `benchmark` or `none`.
    #[arg(long, default_value = "none")]
    validate: String,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    interpolation_rate: Option<f64>,
    /// adaptive | only_semantic | only_artifact | simple_concat
    #[arg(long)]
    mode: Option<String>,
    /// identity | toy | external:<weights.json>
    #[arg(long)]
    recon_backend: Option<String>,
    /// L2-normalize semantic embeddings.
    #[arg(long)]
    normalize_embeddings: bool,
    /// Disable early stopping.
    #[arg(long)]
    no_early_stop: bool,
    /// Shuffle batches freely instead of mixing both classes in each.
    #[arg(long)]
    no_stratify: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Image file or directory, repeatable.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the records to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Corruption applied before scoring, e.g. `jpeg:75`, or `jpeg:75-95` for
    /// one seeded random quality per image.
    #[arg(long)]
    transform: Option<String>,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV report path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RobustnessArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// jpeg | blur | resize | noise | brightness | saturation | contrast
    #[arg(long)]
    kind: String,
    /// `start:end:n`
    #[arg(long)]
    grid: String,
    /// Also emit the untransformed reference point.
    #[arg(long)]
    identity: bool,
    /// Resize keeping aspect ratio (short edge) instead of square.
    #[arg(long)]
    short_edge: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FreqArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Images per class (first N in manifest order).
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// JPEG quality of the compressed comparison.
    #[arg(long, default_value_t = 75)]
    jpeg: u8,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Average log power instead of log magnitude.
    #[arg(long)]
    power: bool,
    /// off | denoised | residual
    #[arg(long, default_value = "residual")]
    denoise: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Robustness CSVs (curves) or one matrix CSV (map).
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// `.svg` for curves, `.png` for a matrix map.
    #[arg(long)]
    out: PathBuf,
    /// Metric column for curves.
    #[arg(long, default_value = "ap")]
    metric: String,
}

#[derive(Debug, Args)]
struct AblationArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Corruption applied to the evaluation images, e.g. `jpeg:75` or `jpeg:75-95`.
    #[arg(long)]
    transform: Option<String>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_real: usize,
    #[arg(long, default_value_t = 2000)]
    n_synthetic: usize,
    #[arg(long, default_value_t = 224)]
    size: usize,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Usage errors go to stderr; `--help` and `--version` go to stdout.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return CommandResult {
                exit_code: code,
                artifacts_written: Vec::new(),
                summary: if code == 0 { "help".into() } else { "usage error".into() },
            };
        }
    };
    let mut written = Vec::new();
    match dispatch(&cli, &mut written) {
        Ok(summary) => CommandResult {
            exit_code: 0,
            artifacts_written: written,
            summary,
        },
        Err(e) => {
            eprintln!("error: {e}");
            CommandResult {
                exit_code: 1,
                artifacts_written: written,
                summary: e.to_string(),
            }
        }
    }
}

fn dispatch(cli: &Cli, written: &mut Vec<PathBuf>) -> Result<String> {
    let workers = cli.workers.unwrap_or_else(crate::training::default_workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Manifest(a) => cmd_manifest(a, cli.seed, written),
        Command::Train(a) => cmd_train(a, cli.seed, workers, written),
        Command::Predict(a) => cmd_predict(a, written),
        Command::Eval(a) => cmd_eval(a, cli.seed, written),
        Command::Robustness(a) => cmd_robustness(a, cli.seed, written),
        Command::Freq(a) => cmd_freq(a, written),
        Command::Plot(a) => cmd_plot(a, written),
        Command::Ablation(a) => cmd_ablation(a, cli.seed, workers, written),
        Command::ToyCorpus(a) => cmd_toy(a, cli.seed, written),
    })
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn write_json<T: Serialize>(value: &T, path: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn cmd_manifest(a: &ManifestArgs, seed: u64, written: &mut Vec<PathBuf>) -> Result<String> {
    let mut rule = LabelingRule::new();
    for r in &a.rules {
        let (dir, lr) = parse_label_rule(r)?;
        rule.insert(dir, lr);
    }
    let fr: Vec<f64> = a
        .split
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad split `{}`", a.split))))
        .collect::<Result<_>>()?;
    if fr.len() != 3 {
        return Err(Error::Config(format!("split `{}` needs three fractions", a.split)));
    }
    let fractions = SplitFractions::new(fr[0], fr[1], fr[2])?;
    let profile = match a.validate.as_str() {
        "benchmark" => ValidationProfile::Benchmark,
        "none" => ValidationProfile::None,
        other => return Err(Error::Config(format!("unknown validation profile `{other}`"))),
    };
    let (m, report) = build_manifest(&a.root, &rule)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let v = validate_manifest(&m, profile);
    if !v.is_valid() {
        let first = &v.violations[0];
        return Err(Error::Manifest(format!(
            "{} violation(s), first: {}",
            v.violations.len(),
            first.message
        )));
    }
    let mut m = split_manifest(&m, fractions, seed)?;
    m.root = a.root.clone();
    m.save(&a.out)?;
    written.push(a.out.clone());
    Ok(format!("{} records, {} skipped", m.records.len(), report.warnings.len()))
}

fn train_config(o: &TrainOverrides, seed: u64, workers: usize) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    cfg.workers = workers;
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.interpolation_rate {
        cfg.interpolation_rate = v;
    }
    if let Some(m) = &o.mode {
        cfg.mode = m.parse::<FusionMode>()?;
    }
    if let Some(b) = &o.recon_backend {
        cfg.backend = b.parse::<BackendChoice>()?;
    }
    if o.normalize_embeddings {
        cfg.normalize_embeddings = true;
    }
    if o.no_early_stop {
        cfg.patience = None;
    }
    if o.no_stratify {
        cfg.stratified_batches = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

fn cmd_train(a: &TrainArgs, seed: u64, workers: usize, written: &mut Vec<PathBuf>) -> Result<String> {
    let mut cfg = train_config(&a.overrides, seed, workers)?;
    cfg.log_path = a.log.clone();
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (det, report) = train_detector(&manifest, &cfg)?;
    save_checkpoint(&det, Some(&cfg), &a.out)?;
    written.push(a.out.clone());
    if let Some(l) = &a.log {
        written.push(l.clone());
    }
    Ok(format!(
        "trained {} for {} epochs (best val AP {:?})",
        cfg.mode,
        report.history.len(),
        report.best_val_ap
    ))
}

#[derive(Serialize)]
struct Prediction {
    path: String,
    score: f64,
    #[serde(rename = "label_at_0.5")]
    label_at_0_5: u8,
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = walkdir::WalkDir::new(p)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .filter(|q| {
                    q.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| crate::manifest::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::NoImages(inputs[0].clone()));
    }
    Ok(out)
}

fn cmd_predict(a: &PredictArgs, written: &mut Vec<PathBuf>) -> Result<String> {
    use rayon::prelude::*;
    let det = load_checkpoint(&a.model, cache_dir().as_deref())?;
    let paths = collect_inputs(&a.inputs)?;
    let records = paths
        .par_iter()
        .map(|p| {
            let score = det.predict_score(&Image::load(p)?)?;
            Ok(Prediction {
                path: p.display().to_string(),
                score,
                label_at_0_5: u8::from(score >= 0.5),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("writing predictions", e))?;
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
        written.push(out.clone());
    }
    let synthetic = records.iter().filter(|r| r.label_at_0_5 == 1).count();
    Ok(format!("{} images scored, {synthetic} flagged synthetic", records.len()))
}

fn cmd_eval(a: &EvalArgs, seed: u64, written: &mut Vec<PathBuf>) -> Result<String> {
    let det = load_checkpoint(&a.model, cache_dir().as_deref())?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let opts = EvalOptions {
        transform: a.transform.as_deref().map(str::parse::<EvalTransform>).transpose()?,
        seed,
        ..Default::default()
    };
    let report = evaluate_report(&manifest, parse_split(&a.split)?, &det, &opts)?;
    report.write_json(&a.out)?;
    written.push(a.out.clone());
    if let Some(c) = &a.csv {
        report.write_csv(c)?;
        written.push(c.clone());
    }
    Ok(format!(
        "average AP {} accuracy {}",
        fmt_opt(report.average.ap),
        fmt_opt(report.average.accuracy)
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn cmd_robustness(a: &RobustnessArgs, seed: u64, written: &mut Vec<PathBuf>) -> Result<String> {
    let kind: TransformKind = a.kind.parse()?;
    let grid = parse_grid(kind, &a.grid)?;
    let det = load_checkpoint(&a.model, cache_dir().as_deref())?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let opts = SweepOptions {
        include_identity: a.identity,
        transform_options: TransformOptions {
            resize_mode: if a.short_edge { ResizeMode::ShortEdge } else { ResizeMode::Square },
        },
        seed,
        ..Default::default()
    };
    let points = robustness_sweep(&manifest, parse_split(&a.split)?, &det, kind, &grid, &opts)?;
    write_robustness_csv(&points, &a.out)?;
    written.push(a.out.clone());
    Ok(format!("{} points for {kind}", points.len()))
}

fn cmd_freq(a: &FreqArgs, written: &mut Vec<PathBuf>) -> Result<String> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let split = parse_split(&a.split)?;
    let opts = SpectrumOptions {
        size: a.size,
        scale: if a.power { SpectrumScale::LogPower } else { SpectrumScale::LogMagnitude },
        denoise: match a.denoise.as_str() {
            "off" => DenoiseMode::Off,
            "denoised" => DenoiseMode::Denoised,
            "residual" => DenoiseMode::Residual,
            other => return Err(Error::Config(format!("unknown denoise mode `{other}`"))),
        },
    };
    let pick = |synthetic: bool| -> Vec<usize> {
        manifest
            .in_split(split)
            .filter(|(_, r)| r.is_synthetic() == synthetic)
            .map(|(i, _)| i)
            .take(a.n)
            .collect()
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    let mut maps = Vec::new();
    for (name, synthetic, jpeg) in [
        ("real", false, false),
        ("synthetic", true, false),
        ("real_jpeg", false, true),
        ("synthetic_jpeg", true, true),
    ] {
        let idx = pick(synthetic);
        if idx.is_empty() {
            return Err(Error::SingleClass(format!("split has no {} images", if synthetic { "synthetic" } else { "real" })));
        }
        let images = idx.into_iter().map(|i| {
            let img = manifest.load_image(&manifest.records[i])?;
            if jpeg {
                img.jpeg_roundtrip(a.jpeg)
            } else {
                Ok(img)
            }
        });
        let map = mean_spectrum(images, &opts)?;
        for (ext, f) in [("csv", true), ("png", false)] {
            let p = a.out.join(format!("{name}.{ext}"));
            if f {
                map.write_csv(&p)?;
            } else {
                map.write_png(&p)?;
            }
            written.push(p);
        }
        maps.push(map);
    }
    let before = spectrum_gap_report(&maps[0], &maps[1])?;
    let after = spectrum_gap_report(&maps[2], &maps[3])?;
    for (name, g) in [("diff", &before), ("diff_jpeg", &after)] {
        let p = a.out.join(format!("{name}.csv"));
        write_matrix_csv(&g.difference, &p)?;
        written.push(p);
        let p = a.out.join(format!("{name}.png"));
        write_matrix_png(&g.difference, &p)?;
        written.push(p);
    }
    #[derive(Serialize)]
    struct Gaps {
        gap_before: f64,
        gap_after: f64,
        jpeg_quality: u8,
        n_per_class: usize,
    }
    write_json(
        &Gaps {
            gap_before: before.gap,
            gap_after: after.gap,
            jpeg_quality: a.jpeg,
            n_per_class: maps[0].n_images,
        },
        &a.out.join("gap.json"),
        written,
    )?;
    Ok(format!("high-frequency gap {:.4} before, {:.4} after JPEG-{}", before.gap, after.gap, a.jpeg))
}

fn cmd_plot(a: &PlotArgs, written: &mut Vec<PathBuf>) -> Result<String> {
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "png" => {
            if a.inputs.len() != 1 {
                return Err(Error::Config("a map plot takes exactly one matrix CSV".into()));
            }
            let m = read_matrix_csv(&a.inputs[0])?;
            write_matrix_png(&m, &a.out)?;
            written.push(a.out.clone());
            Ok(format!("{}x{} map", m.nrows(), m.ncols()))
        }
        "svg" => {
            let n = plot_curves(&a.inputs, &a.metric, &a.out)?;
            written.push(a.out.clone());
            Ok(format!("{n} curves"))
        }
        _ => Err(Error::Config(format!("plot output must end in .svg or .png, got {}", a.out.display()))),
    }
}

fn plot_curves(inputs: &[PathBuf], metric: &str, out: &Path) -> Result<usize> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in inputs {
        let mut r = csv::Reader::from_path(p)?;
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("{}: no `{name}` column", p.display())))
        };
        let (ci, pi, mi) = (col("identity")?, col("param")?, col(metric)?);
        let mut kind = String::new();
        let mut pts = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.get(ci) == Some("true") {
                continue;
            }
            if kind.is_empty() {
                kind = rec.get(col("kind")?).unwrap_or("").to_string();
            }
            let x: f64 = rec[pi].parse().map_err(|_| Error::Config(format!("{}: bad param", p.display())))?;
            if let Ok(y) = rec[mi].parse::<f64>() {
                pts.push((x, y));
            }
        }
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(kind);
        series.push((label, pts));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in &series {
        for &(x, _) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if !x0.is_finite() {
        return Err(Error::EmptyInput);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let plot_err = |e: &dyn std::fmt::Display| Error::Config(format!("plotting: {e}"));
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .y_desc(metric)
        .x_desc("parameter")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(series.len())
}

fn cmd_ablation(a: &AblationArgs, seed: u64, workers: usize, written: &mut Vec<PathBuf>) -> Result<String> {
    let cfg = train_config(&a.overrides, seed, workers)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let eval = EvalOptions {
        transform: a.transform.as_deref().map(str::parse::<EvalTransform>).transpose()?,
        seed,
        ..Default::default()
    };
    let report = run_ablation(&manifest, &cfg, parse_split(&a.split)?, &eval)?;
    report.write_csv(&a.out)?;
    written.push(a.out.clone());
    let acc = |m: &str| fmt_opt(report.row(m).and_then(|r| r.metrics.accuracy));
    Ok(format!(
        "accuracy adaptive {} / only_semantic {} / only_artifact {} / simple_concat {}",
        acc("adaptive"),
        acc("only_semantic"),
        acc("only_artifact"),
        acc("simple_concat")
    ))
}

fn cmd_toy(a: &ToyArgs, seed: u64, written: &mut Vec<PathBuf>) -> Result<String> {
    let cfg = ToyCorpusConfig {
        n_real: a.n_real,
        n_synthetic: a.n_synthetic,
        size: a.size,
        seed,
        ..Default::default()
    };
    let corpus = generate_toy_corpus(&a.out, &cfg)?;
    let rules: Vec<String> = corpus
        .rule
        .iter()
        .map(|(dir, r)| format!("--rule {dir}={}:{}", r.label, r.source))
        .collect();
    written.push(a.out.clone());
    Ok(format!("{} images written; manifest rules: {}", corpus.written, rules.join(" ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        let r = run(["synthdetect"]);
        assert_eq!(r.exit_code, 2);
        assert!(r.artifacts_written.is_empty());
    }

    #[test]
    fn unknown_subcommand_and_bad_flag() {
        assert_eq!(run(["synthdetect", "frobnicate"]).exit_code, 2);
        assert_eq!(run(["synthdetect", "eval", "--bogus"]).exit_code, 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["synthdetect", "--help"]).exit_code, 0);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let r = run(["synthdetect", "predict", "--model", "/nonexistent/ckpt.json", "--input", "x.png"]);
        assert_eq!(r.exit_code, 1);
    }
}
