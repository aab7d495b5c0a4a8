//! Scan an image tree into a manifest, assign splits and validate it.
//!
//! cargo run --release --example manifest

mod common;

use synthdetect::manifest::{sources, validate_manifest, DatasetManifest, Split, ValidationProfile};

fn main() -> synthdetect::Result<()> {
    let toy = common::toy_corpus(40, 64)?;
    let m = &toy.manifest;
    println!("{} records under {}", m.records.len(), m.root.display());
    println!("sources: {:?}", sources(m));
    for split in [Split::Train, Split::Val, Split::Test] {
        let (real, synth) = m.label_counts(split);
        println!("{split:?}: {real} real / {synth} synthetic");
    }

    let first_synth = m.records.iter().find(|r| r.is_synthetic()).unwrap();
    println!("example record: {}", serde_json::to_string(first_synth)?);

    let report = validate_manifest(m, ValidationProfile::Benchmark);
    println!("benchmark profile valid: {}", report.is_valid());

    // Round trip through disk.
    let back = DatasetManifest::load(&toy.manifest_path)?;
    assert_eq!(back.records, m.records);
    Ok(())
}
