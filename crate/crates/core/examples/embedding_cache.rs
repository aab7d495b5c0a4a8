//! Plugging in an external backbone: embeddings computed elsewhere are
//! stored in a content-addressed cache and served as a frozen backbone.
//!
//! cargo run --release --example embedding_cache

use synthdetect::augment::preprocess_input;
use synthdetect::model::{build_backbone, BackboneChoice};
use synthdetect::semantic::EmbeddingCache;
use synthdetect::toy::toy_real_image;

fn main() -> synthdetect::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| synthdetect::Error::io("creating temp dir", e))?;
    let cache = EmbeddingCache::open(dir.path())?;
    let id = "my-encoder-v1";

    // Pretend an external encoder produced these 4-d vectors.
    let images: Vec<_> = (0..3).map(|s| toy_real_image(s, 64, 0.02).and_then(|i| preprocess_input(&i))).collect::<Result<_, _>>()?;
    for (k, img) in images.iter().enumerate() {
        let v = vec![k as f64, 1.0, -1.0, 0.5 * k as f64];
        cache.put(&EmbeddingCache::key(img, id), id, &v)?;
    }
    println!("{} cached embeddings", cache.len());

    let backbone = build_backbone(
        &BackboneChoice::Cached {
            id: id.into(),
            dim: 4,
            dir: Some(dir.path().to_path_buf()),
        },
        true,
    )?;
    println!("backbone {} ({} dims)", backbone.id(), backbone.dim());
    for img in &images {
        println!("{:?}", backbone.embed(img)?);
    }

    // An image the external encoder never saw is an error, not a guess.
    let unseen = preprocess_input(&toy_real_image(99, 64, 0.02)?)?;
    println!("unseen image: {}", backbone.embed(&unseen).unwrap_err());
    Ok(())
}
