//! Per-source metrics on the test split, clean and JPEG-compressed.
//!
//! cargo run --release --example evaluate

mod common;

use synthdetect::augment::TransformSpec;
use synthdetect::evaluation::{evaluate_report, EvalOptions, EvalTransform};
use synthdetect::manifest::Split;

fn main() -> synthdetect::Result<()> {
    let toy = common::toy_corpus(120, 224)?;
    let det = common::quick_detector(&toy)?;

    let transforms = [
        None,
        Some(EvalTransform::from(TransformSpec::jpeg(75))),
        // One seeded quality draw per image.
        Some(EvalTransform::RandomJpeg { lo: 75, hi: 95 }),
    ];
    for transform in transforms {
        let opts = EvalOptions {
            transform,
            ..Default::default()
        };
        let report = evaluate_report(&toy.manifest, Split::Test, &det, &opts)?;
        println!("transform {:?}", transform.map(|t| t.to_string()));
        for row in report.rows() {
            println!(
                "  {:<12} AP {:.4} AUC {:.4} acc {:.4}",
                row.source,
                row.ap.unwrap_or(f64::NAN),
                row.auc.unwrap_or(f64::NAN),
                row.accuracy.unwrap_or(f64::NAN)
            );
        }
        report.write_csv(&toy.dir.path().join("report.csv"))?;
    }
    Ok(())
}
