//! Adaptive fusion: regulator coefficients, branch dropout and the simple
//! ablation combinations.
//!
//! cargo run --release --example fusion

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthdetect::fusion::{
    ablation_fuse, sample_dropout_mask, AblationMode, BranchInputs, DropoutPolicy, FusionMode, FusionNetwork, Mask,
};

fn main() -> synthdetect::Result<()> {
    let net = FusionNetwork::new(FusionMode::Adaptive, 8, 4, 0);
    let v_sem = [0.3, -0.1, 0.8, 0.0, 0.5, -0.7, 0.2, 0.1];
    let v_art = [1.2, 0.4, -0.3, 0.9];

    for (name, mask) in [("both", Mask::BOTH), ("drop artifact", Mask::SEM_ONLY), ("drop semantic", Mask::ART_ONLY)] {
        let t = net.forward(&v_sem, &v_art, mask)?;
        println!(
            "{name:<14} alpha {:.4} beta {:.4} logit {:+.5}",
            t.alpha(),
            t.beta(),
            t.logit
        );
    }
    println!("inference score {:.5}", net.score(&v_sem, &v_art)?);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = DropoutPolicy::default();
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..10_000 {
        let m = sample_dropout_mask(&policy, &mut rng);
        *counts.entry((m.sem as u8, m.art as u8)).or_insert(0) += 1;
    }
    println!("mask counts over 10000 draws: {counts:?}");

    let inputs = BranchInputs {
        sem_score: Some(0.2),
        art_score: Some(0.9),
        concat: None,
    };
    for mode in AblationMode::ALL {
        match ablation_fuse(mode, &inputs) {
            Ok(s) => println!("{:<14} {s:.3}", mode.name()),
            Err(e) => println!("{:<14} needs more inputs: {e}", mode.name()),
        }
    }
    Ok(())
}
