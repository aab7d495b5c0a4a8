//! The full command-line workflow driven in-process: toy corpus, manifest,
//! training, prediction and evaluation.
//!
//! cargo run --release --example command_line

use synthdetect::cli;

fn run(args: &[&str]) -> cli::CommandResult {
    let res = cli::run(std::iter::once("synthdetect").chain(args.iter().copied()));
    println!("$ synthdetect {}\n  exit {}: {}", args.join(" "), res.exit_code, res.summary);
    res
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let p = |name: &str| dir.path().join(name).display().to_string();

    run(&["toy-corpus", "--out", &p("corpus"), "--n-real", "40", "--n-synthetic", "40", "--size", "96"]);
    run(&[
        "manifest",
        "--root",
        &p("corpus"),
        "--rule",
        "real=0:toy-photos",
        "--rule",
        "toy-gen-a=1:toy-gen-a",
        "--rule",
        "toy-gen-b=1:toy-gen-b",
        "--split",
        "0.6,0.2,0.2",
        "--validate",
        "benchmark",
        "--out",
        &p("manifest.json"),
    ]);
    run(&[
        "train",
        "--manifest",
        &p("manifest.json"),
        "--out",
        &p("model.json"),
        "--epochs",
        "3",
        "--lr",
        "1e-3",
        "--batch-size",
        "16",
    ]);
    run(&["predict", "--model", &p("model.json"), "--input", &p("corpus/toy-gen-a")]);
    run(&["eval", "--model", &p("model.json"), "--manifest", &p("manifest.json"), "--out", &p("report.json")]);
    run(&[
        "robustness",
        "--model",
        &p("model.json"),
        "--manifest",
        &p("manifest.json"),
        "--kind",
        "noise",
        "--grid",
        "0.05:0.25:3",
        "--out",
        &p("noise.csv"),
    ]);
    // A usage error exits 2.
    run(&["train", "--epochs", "three"]);
}
