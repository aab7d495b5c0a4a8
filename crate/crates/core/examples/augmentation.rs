//! The seven corruptions at the middle of their benchmark range, plus the
//! random training-time augmentation.
//!
//! cargo run --release --example augmentation

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthdetect::augment::{apply_transform, preprocess_input, sample_train_augmentation, AugmentationPolicy, TransformKind, TransformSpec};
use synthdetect::toy::toy_real_image;

// Resize changes the shape, so there is nothing to compare pixelwise.
fn mean_abs_change(a: &synthdetect::Image, b: &synthdetect::Image) -> String {
    match a.abs_diff(b) {
        Ok(d) => format!("{:.4}", d.mean()),
        Err(_) => "n/a".into(),
    }
}

fn main() -> synthdetect::Result<()> {
    let img = toy_real_image(7, 128, 0.025)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for kind in TransformKind::ALL {
        let (lo, hi) = kind.benchmark_range();
        let mut p = 0.5 * (lo + hi);
        if kind == TransformKind::Jpeg {
            p = p.round();
        }
        let spec = TransformSpec::new(kind, p)?;
        let out = apply_transform(&img, &spec, &mut rng)?;
        println!(
            "{spec:<18} -> {}x{}  mean |change| {}",
            out.width(),
            out.height(),
            mean_abs_change(&img, &out)
        );
    }

    // Training draws: JPEG with probability 0.5 at a random quality.
    let policy = AugmentationPolicy::default();
    let drawn: Vec<String> = (0..30)
        .filter_map(|_| sample_train_augmentation(&policy, &mut rng))
        .map(|s| s.to_string())
        .collect();
    println!("30 training draws -> {} augmented: {drawn:?}", drawn.len());

    let x = preprocess_input(&img)?;
    println!("model input {}x{}x{}", x.width(), x.height(), x.channels());
    Ok(())
}
