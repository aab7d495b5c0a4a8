//! Adaptive fusion against single-branch detectors and simple combinations,
//! scored under JPEG-75.
//!
//! cargo run --release --example ablation

mod common;

use synthdetect::ablation::run_ablation;
use synthdetect::augment::TransformSpec;
use synthdetect::evaluation::EvalOptions;
use synthdetect::manifest::Split;

fn main() -> synthdetect::Result<()> {
    let toy = common::toy_corpus(120, 224)?;
    let eval = EvalOptions {
        transform: Some(TransformSpec::jpeg(75).into()),
        ..Default::default()
    };
    let report = run_ablation(&toy.manifest, &common::quick_config(), Split::Test, &eval)?;
    for row in &report.rows {
        let m = &row.metrics;
        println!(
            "{:<14} AP {:.4} acc {:.4}",
            row.method,
            m.ap.unwrap_or(f64::NAN),
            m.accuracy.unwrap_or(f64::NAN)
        );
    }
    report.write_csv(&toy.dir.path().join("ablation.csv"))?;
    Ok(())
}
