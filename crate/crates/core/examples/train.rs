//! Train a detector on a toy corpus, save it, reload it and score images.
//!
//! cargo run --release --example train

mod common;

use synthdetect::manifest::Split;
use synthdetect::{load_checkpoint, save_checkpoint, train_detector};

fn main() -> synthdetect::Result<()> {
    let toy = common::toy_corpus(120, 224)?;
    let cfg = common::quick_config();
    let (det, report) = train_detector(&toy.manifest, &cfg)?;
    for e in &report.history {
        println!(
            "epoch {} loss {:.4} val AP {:.4} val acc {:.4} ({:.1}s)",
            e.epoch,
            e.train_loss,
            e.val_ap.unwrap_or(f64::NAN),
            e.val_accuracy.unwrap_or(f64::NAN),
            e.seconds
        );
    }
    println!("backbone untouched by training: {}", report.backbone_unchanged);

    let path = toy.dir.path().join("model.json");
    save_checkpoint(&det, Some(&cfg), &path)?;
    let back = load_checkpoint(&path, None)?;

    for (_, rec) in toy.manifest.in_split(Split::Test).take(6) {
        let img = toy.manifest.load_image(rec)?;
        let (a, b) = (det.predict_score(&img)?, back.predict_score(&img)?);
        assert_eq!(a.to_bits(), b.to_bits());
        println!("{:<40} label {} score {a:.4}", rec.path, rec.label);
    }
    Ok(())
}
