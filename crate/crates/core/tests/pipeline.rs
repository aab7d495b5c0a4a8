//! Command-line workflow on a tiny toy corpus, plus checkpoint error paths.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use synthdetect::artifact::{ArtifactEncoder, ArtifactEncoderConfig, StoredBackend};
use synthdetect::cli;
use synthdetect::fusion::{FusionMode, FusionNetwork};
use synthdetect::model::load_checkpoint_with;
use synthdetect::semantic::{SemanticBackbone, ToyBackbone};
use synthdetect::{load_checkpoint, save_checkpoint, Detector, Error, Image};

fn run(args: &[&str]) -> cli::CommandResult {
    cli::run(std::iter::once("synthdetect").chain(args.iter().copied()))
}

fn ok(args: &[&str]) -> cli::CommandResult {
    let r = run(args);
    assert_eq!(r.exit_code, 0, "{args:?}: {}", r.summary);
    r
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn toy_workflow_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let manifest = d.join("manifest.json");
    let model = d.join("model.json");

    ok(&["toy-corpus", "--out", &s(&corpus), "--n-real", "24", "--n-synthetic", "24", "--size", "64"]);
    ok(&[
        "manifest", "--root", &s(&corpus),
        "--rule", "real=0:toy-photos", "--rule", "toy-gen-a=1:toy-gen-a", "--rule", "toy-gen-b=1:toy-gen-b",
        "--split", "0.5,0.25,0.25", "--validate", "benchmark", "--out", &s(&manifest),
    ]);
    let log = d.join("train.jsonl");
    ok(&[
        "train", "--manifest", &s(&manifest), "--out", &s(&model), "--log", &s(&log),
        "--epochs", "1", "--batch-size", "8", "--lr", "1e-3",
    ]);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1);

    // predict: one JSON record per image.
    let preds = d.join("preds.jsonl");
    ok(&["predict", "--model", &s(&model), "--input", &s(&corpus.join("toy-gen-a")), "--out", &s(&preds)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    for v in &lines {
        let score = v["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert_eq!(v["label_at_0.5"].as_u64().unwrap(), u64::from(score >= 0.5));
        assert!(v["path"].as_str().unwrap().ends_with(".png"));
    }

    // eval, clean and with a random JPEG quality per image.
    for (name, transform) in [("clean", None), ("jpeg", Some("jpeg:75-95"))] {
        let out = d.join(format!("eval_{name}.json"));
        let csv = d.join(format!("eval_{name}.csv"));
        let mut args = vec!["eval", "--model", &s(&model), "--manifest", &s(&manifest)]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        args.extend(["--out".into(), s(&out), "--csv".into(), s(&csv)]);
        if let Some(t) = transform {
            args.extend(["--transform".into(), t.into()]);
        }
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&argv);
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(report["per_source"].as_array().unwrap().len(), 2);
        assert!(csv.exists());
        if transform.is_some() {
            assert_eq!(report["transform"]["random_jpeg"]["lo"], 75);
        }
    }

    // robustness: exactly |grid| rows, reproducible.
    let curve = |name: &str| {
        let out = d.join(name);
        ok(&[
            "robustness", "--model", &s(&model), "--manifest", &s(&manifest),
            "--kind", "blur", "--grid", "0.5:2.5:5", "--out", &s(&out),
        ]);
        fs::read_to_string(out).unwrap()
    };
    let a = curve("blur_a.csv");
    assert_eq!(a.lines().count(), 1 + 5);
    assert_eq!(a, curve("blur_b.csv"));
    let r = run(&[
        "robustness", "--model", &s(&model), "--manifest", &s(&manifest),
        "--kind", "jpeg", "--grid", "30:95:3", "--out", &s(&d.join("bad.csv")),
    ]);
    assert_eq!(r.exit_code, 1);
    assert!(r.summary.contains("75"), "{}", r.summary);

    let svg = d.join("blur.svg");
    ok(&["plot", "--input", &s(&d.join("blur_a.csv")), "--out", &s(&svg)]);
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));

    let freq = d.join("freq");
    ok(&["freq", "--manifest", &s(&manifest), "--split", "train", "--size", "64", "--n", "8", "--out", &s(&freq)]);
    for f in ["real.csv", "synthetic_jpeg.png", "diff.csv", "gap.json"] {
        assert!(freq.join(f).exists(), "{f}");
    }
    let map = d.join("diff.png");
    ok(&["plot", "--input", &s(&freq.join("diff.csv")), "--out", &s(&map)]);
    assert!(image::open(&map).is_ok());
}

fn small_detector() -> Detector {
    let backbone: Arc<dyn SemanticBackbone> = Arc::new(ToyBackbone::default());
    let encoder = ArtifactEncoder::new(ArtifactEncoderConfig::default(), 1);
    let fusion = FusionNetwork::new(FusionMode::Adaptive, backbone.dim(), encoder.dim(), 2);
    Detector::new(backbone, StoredBackend::Identity, encoder, fusion).unwrap()
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let det = small_detector();
    save_checkpoint(&det, None, &path).unwrap();

    let back = load_checkpoint(&path, None).unwrap();
    for seed in 0..5u32 {
        let img = Image::from_fn(40, 30, 3, |x, y, c| ((x * 13 + y * 7 + c as usize * 5 + seed as usize) % 17) as f32 / 16.0).unwrap();
        assert_eq!(det.predict_score(&img).unwrap().to_bits(), back.predict_score(&img).unwrap().to_bits());
    }

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["version"] = 99.into();
    let bumped = dir.path().join("v99.json");
    fs::write(&bumped, v.to_string()).unwrap();
    assert!(matches!(
        load_checkpoint(&bumped, None),
        Err(Error::VersionMismatch { found: 99, .. })
    ));

    let other: Arc<dyn SemanticBackbone> = Arc::new(ToyBackbone::new(12345));
    assert!(matches!(load_checkpoint_with(&path, other), Err(Error::BackboneMismatch { .. })));

    let truncated = dir.path().join("cut.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&truncated, None), Err(Error::Checkpoint(_))));

    let r = run(&["predict", "--model", &s(&truncated), "--input", &s(&path)]);
    assert_eq!(r.exit_code, 1);
}
