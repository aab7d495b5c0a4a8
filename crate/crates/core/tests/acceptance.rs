//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criteria 1-4 and 7 check contracts against oracles written here, not
//! against the library's own helpers. Criteria 5, 6 and 8 run the toy
//! corpus end to end through the command-line entry point and take several
//! minutes on a single core.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthdetect::artifact::{extract_artifact, IdentityBackend, LinearBackend, PatchAutoencoder, ShiftBackend};
use synthdetect::augment::TransformKind;
use synthdetect::evaluation::{parameter_grid, robustness_sweep, SweepOptions};
use synthdetect::fusion::{sample_dropout_mask, DropoutPolicy, FusionMode, FusionNetwork, Mask, Regulator};
use synthdetect::manifest::{build_manifest, split_manifest, DatasetManifest, Split, SplitFractions};
use synthdetect::metrics::{average_precision, roc_auc, tpr_at_fpr};
use synthdetect::nn::Linear;
use synthdetect::semantic::{augment_batch_with_interpolation, interpolate_features, SoftSample};
use synthdetect::toy::{generate_toy_corpus, ToyCorpusConfig};
use synthdetect::{cli, load_checkpoint, Image};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles, straight from the definitions.

/// Sweeps every observed score as a threshold from high to low and sums
/// precision times the recall increment.
fn oracle_ap(labels: &[bool], scores: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ts = scores.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for t in ts {
        let mut tp = 0.0;
        let mut flagged = 0.0;
        for (l, s) in labels.iter().zip(scores) {
            if *s >= t {
                flagged += 1.0;
                if *l {
                    tp += 1.0;
                }
            }
        }
        ap += (tp / pos - last_recall) * (tp / flagged);
        last_recall = tp / pos;
    }
    ap
}

/// Mann-Whitney pair counting.
fn oracle_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

/// Best TPR among thresholds (observed scores plus +inf) whose FPR stays
/// within the cap.
fn oracle_tpr(labels: &[bool], scores: &[f64], cap: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    scores
        .iter()
        .copied()
        .chain([f64::INFINITY])
        .filter_map(|t| {
            let tp = labels.iter().zip(scores).filter(|(l, s)| **l && **s >= t).count() as f64;
            let fp = labels.iter().zip(scores).filter(|(l, s)| !**l && **s >= t).count() as f64;
            (fp / neg <= cap).then_some(tp / pos)
        })
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(2..=100);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // Every other instance draws from a coarse grid to force ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| if k % 2 == 0 { rng.gen::<f64>() } else { rng.gen_range(0..8) as f64 / 8.0 })
            .collect();
        let pairs = [
            (average_precision(&labels, &scores).unwrap(), oracle_ap(&labels, &scores)),
            (roc_auc(&labels, &scores).unwrap(), oracle_auc(&labels, &scores)),
            (tpr_at_fpr(&labels, &scores, 0.1).unwrap(), oracle_tpr(&labels, &scores, 0.1)),
            (tpr_at_fpr(&labels, &scores, 0.01).unwrap(), oracle_tpr(&labels, &scores, 0.01)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-9 && secs < 10.0, format!("max |diff| {worst:.2e} over 200 instances in {secs:.2}s"))
}

// ---------------------------------------------------------------------------

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.gen::<f32>()).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let identity_zero = (0..50).all(|_| {
        let x = random_image(&mut rng, 9, 7, 3);
        extract_artifact(&x, &IdentityBackend).unwrap().delta().data().iter().all(|&v| v == 0.0)
    });

    // Dyadic values keep every step exact in f32:
    // mu = E x = (0.375, 0.875), x' = D mu = (0.375, 0.625, 0.875, 0.96875).
    let x = Image::new(2, 2, 1, vec![0.25, 0.5, 0.75, 1.0]).unwrap();
    let e = DMatrix::from_row_slice(2, 4, &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    let d = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 1.0]);
    let linear = LinearBackend::new((2, 2, 1), e, d).unwrap();
    let table: [f32; 4] = [0.125, 0.125, 0.125, 0.03125];
    let delta = extract_artifact(&x, &linear).unwrap();
    let table_ok = delta.delta().data() == table;

    let training: Vec<Image> = (0..8).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
    let patch_ae = PatchAutoencoder::fit(&training, 4, 6, 10_000, 3).unwrap();
    let shift = ShiftBackend(0.2);
    let mut negatives = 0usize;
    for i in 0..1000 {
        let x = random_image(&mut rng, 16, 16, 3);
        let map = match i % 3 {
            0 => extract_artifact(&x, &IdentityBackend),
            1 => extract_artifact(&x, &shift),
            _ => extract_artifact(&x, &patch_ae),
        }
        .unwrap();
        negatives += map.delta().data().iter().filter(|&&v| !(v >= 0.0)).count();
    }
    outcome(
        identity_zero && table_ok && negatives == 0,
        format!(
            "identity all-zero {identity_zero}; linear table {:?} exact {table_ok}; negative entries over 1000 images {negatives}",
            delta.delta().data()
        ),
    )
}

fn criterion_3() -> Outcome {
    let r = SoftSample { embedding: vec![0.5, -1.0, 2.0, 0.25], score: 0.0 };
    let s = SoftSample { embedding: vec![1.5, 3.0, -2.0, 0.75], score: 1.0 };
    let at0 = interpolate_features(&r, &s, 0.0).unwrap();
    let at1 = interpolate_features(&r, &s, 1.0).unwrap();
    let endpoints = at0 == r && at1 == s;
    // Exact for dyadic inputs and weights.
    let mut linear = true;
    for (delta, want) in [
        (0.5, vec![1.0, 1.0, 0.0, 0.5]),
        (0.25, vec![0.75, 0.0, 1.0, 0.375]),
    ] {
        let m = interpolate_features(&r, &s, delta).unwrap();
        linear &= m.embedding == want && m.score == delta;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut replaced, mut total) = (0usize, 0usize);
    for _ in 0..625 {
        let batch: Vec<SoftSample> = (0..16)
            .map(|i| SoftSample {
                embedding: vec![i as f64; 4],
                score: if i % 2 == 0 { 0.0 } else { 1.0 },
            })
            .collect();
        let out = augment_batch_with_interpolation(&batch, 0.5, &mut rng).unwrap();
        replaced += out.replacements.len();
        total += out.samples.len();
    }
    let fraction = replaced as f64 / total as f64;
    outcome(
        endpoints && linear && total == 10_000 && (0.47..=0.53).contains(&fraction),
        format!("endpoints exact {endpoints}; linearity exact {linear}; replaced {replaced}/{total} = {fraction:.4}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let policy = DropoutPolicy::default();
    let both_dropped = (0..100_000)
        .filter(|_| {
            let m = sample_dropout_mask(&policy, &mut rng);
            !m.sem && !m.art
        })
        .count();

    let mut net = FusionNetwork::new(FusionMode::Adaptive, 6, 5, 9);
    net.head = Linear::new(11, 1, 0.5, &mut rng);
    net.reg_sem.output = Linear::new(Regulator::HIDDEN, 1, 0.3, &mut rng);
    net.reg_art.output = Linear::new(Regulator::HIDDEN, 1, 0.3, &mut rng);
    let v_sem: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v_art: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = net.forward(&v_sem, &v_art, Mask::SEM_ONLY).unwrap().logit;
    let bitwise = (0..100).all(|_| {
        let other: Vec<f64> = (0..5).map(|_| rng.gen_range(-100.0..100.0)).collect();
        net.forward(&v_sem, &other, Mask::SEM_ONLY).unwrap().logit.to_bits() == base.to_bits()
    });

    // Central differences of the logit against the analytic backward pass,
    // for every parameter and every artifact input.
    let mut worst: f64 = 0.0;
    for mask in [Mask::BOTH, Mask::SEM_ONLY, Mask::ART_ONLY] {
        let trace = net.forward(&v_sem, &v_art, mask).unwrap();
        let mut grads = net.zero_grads();
        let dv_art = net.backward(&v_sem, &v_art, &trace, 1.0, &mut grads);
        let analytic = grads.flatten();
        // Central differences are O(h^2); h = 1e-6 lets cancellation error
        // swamp gradients near 1e-7, so use a wider step.
        let h = 1e-4;
        let mut rel = |a: f64, fd: f64| {
            let scale = a.abs().max(fd.abs());
            if scale > 1e-8 {
                worst = worst.max((a - fd).abs() / scale);
            }
        };
        for (i, &a) in analytic.iter().enumerate() {
            let logit = |d: f64| {
                let mut p = net.clone();
                let mut k = 0;
                p.for_each_param(|v| {
                    if k == i {
                        *v += d;
                    }
                    k += 1;
                });
                p.forward(&v_sem, &v_art, mask).unwrap().logit
            };
            rel(a, (logit(h) - logit(-h)) / (2.0 * h));
        }
        for (i, &a) in dv_art.iter().enumerate() {
            let logit = |d: f64| {
                let mut x = v_art.clone();
                x[i] += d;
                net.forward(&v_sem, &x, mask).unwrap().logit
            };
            rel(a, (logit(h) - logit(-h)) / (2.0 * h));
        }
    }
    outcome(
        both_dropped == 0 && bitwise && worst < 1e-4,
        format!("(0,0) masks in 1e5 draws {both_dropped}; bitwise independence {bitwise}; worst relative gradient error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// End-to-end criteria on the toy corpus.

fn run_cli(args: &[&str]) -> Result<cli::CommandResult, String> {
    let argv = std::iter::once("synthdetect").chain(args.iter().copied());
    let res = cli::run(argv);
    if res.exit_code == 0 {
        Ok(res)
    } else {
        Err(format!("`{}` exited {}: {}", args.join(" "), res.exit_code, res.summary))
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn overall_accuracy(path: &Path) -> f64 {
    read_json(path)["overall"]["accuracy"].as_f64().unwrap()
}

fn toy_manifest(dir: &Path) -> PathBuf {
    let root = dir.join("corpus");
    let corpus = generate_toy_corpus(&root, &ToyCorpusConfig::default()).unwrap();
    let (manifest, _) = build_manifest(&root, &corpus.rule).unwrap();
    let manifest = split_manifest(&manifest, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 0).unwrap();
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    path
}

fn criterion_5(dir: &Path, manifest: &Path) -> Result<Outcome, String> {
    let ckpt = dir.join("model.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let start = Instant::now();
    run_cli(&["train", "--manifest", &s(manifest), "--out", &s(&ckpt), "--log", &s(&dir.join("train.jsonl"))])?;
    let clean = dir.join("eval_clean.json");
    run_cli(&["eval", "--model", &s(&ckpt), "--manifest", &s(manifest), "--out", &s(&clean)])?;
    let secs = start.elapsed().as_secs_f64();
    let jpeg = dir.join("eval_jpeg75.json");
    run_cli(&["eval", "--model", &s(&ckpt), "--manifest", &s(manifest), "--transform", "jpeg:75", "--out", &s(&jpeg)])?;
    let (acc, acc_jpeg) = (overall_accuracy(&clean), overall_accuracy(&jpeg));
    let drop = acc - acc_jpeg;
    Ok(outcome(
        acc >= 0.9 && secs < 600.0 && drop <= 0.15,
        format!("test accuracy {acc:.4} after {secs:.0}s of training and evaluation; JPEG-75 accuracy {acc_jpeg:.4} (drop {:.1} pp)", drop * 100.0),
    ))
}

fn criterion_6(dir: &Path, manifest: &Path) -> Result<Outcome, String> {
    let out = dir.join("ablation.csv");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    run_cli(&["ablation", "--manifest", &s(manifest), "--transform", "jpeg:75", "--out", &s(&out)])?;
    let mut reader = csv::Reader::from_path(&out).map_err(|e| e.to_string())?;
    let mut acc = std::collections::BTreeMap::new();
    for row in reader.deserialize::<std::collections::HashMap<String, String>>() {
        let row = row.map_err(|e| e.to_string())?;
        acc.insert(row["method"].clone(), row["accuracy"].parse::<f64>().map_err(|e| e.to_string())?);
    }
    let adaptive = acc["adaptive"];
    let rivals = ["only_semantic", "only_artifact", "simple_concat"];
    let pass = rivals.iter().all(|m| adaptive >= acc[*m]);
    let detail = std::iter::once(format!("adaptive {adaptive:.4}"))
        .chain(rivals.iter().map(|m| format!("{m} {:.4}", acc[*m])))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(pass, format!("JPEG-75 test accuracy: {detail}")))
}

fn criterion_7(dir: &Path, manifest: &Path) -> Result<Outcome, String> {
    let full = DatasetManifest::load(manifest).map_err(|e| e.to_string())?;
    let det = load_checkpoint(&dir.join("model.json"), None).map_err(|e| e.to_string())?;
    // A 24 + 24 slice of the test split keeps 7 x 5 x 2 evaluations short.
    let mut records = Vec::new();
    for synthetic in [false, true] {
        records.extend(
            full.in_split(Split::Test)
                .filter(|(_, r)| r.is_synthetic() == synthetic)
                .take(24)
                .map(|(_, r)| r.clone()),
        );
    }
    let small = DatasetManifest::new(full.root.clone(), records);
    let opts = SweepOptions { seed: 7, ..Default::default() };
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in TransformKind::ALL {
        let (lo, hi) = kind.benchmark_range();
        let grid = parameter_grid(kind, lo, hi, 5).map_err(|e| e.to_string())?;
        let a = robustness_sweep(&small, Split::Test, &det, kind, &grid, &opts).map_err(|e| e.to_string())?;
        let b = robustness_sweep(&small, Split::Test, &det, kind, &grid, &opts).map_err(|e| e.to_string())?;
        let in_unit = a.iter().all(|p| {
            [p.ap, p.auc, p.accuracy].iter().all(|m| m.is_some_and(|v| (0.0..=1.0).contains(&v)))
        });
        let ok = a.len() == grid.len() && in_unit && a == b;
        pass &= ok;
        lines.push(format!("{kind} {}/{}{}", a.len(), grid.len(), if ok { "" } else { " FAIL" }));
    }
    Ok(outcome(pass, format!("points per grid: {}", lines.join(", "))))
}

fn criterion_8(dir: &Path, manifest: &Path) -> Result<Outcome, String> {
    let out = dir.join("freq");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    run_cli(&["freq", "--manifest", &s(manifest), "--n", "200", "--out", &s(&out)])?;
    let gaps = read_json(&out.join("gap.json"));
    let before = gaps["gap_before"].as_f64().unwrap();
    let after = gaps["gap_after"].as_f64().unwrap();
    Ok(outcome(before > after, format!("high-frequency gap {before:.4} before, {after:.4} after JPEG-75")))
}

fn report(n: usize, name: &str, result: Result<Outcome, String>, failures: &mut usize) {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !pass {
        *failures += 1;
    }
    println!("criterion {n} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn main() {
    // `cargo test -- --list` and filters come through here too.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut failures = 0;
    report(1, "metric oracles", Ok(criterion_1()), &mut failures);
    report(2, "artifact extraction", Ok(criterion_2()), &mut failures);
    report(3, "feature interpolation", Ok(criterion_3()), &mut failures);
    report(4, "dropout and fusion gradients", Ok(criterion_4()), &mut failures);

    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let manifest = toy_manifest(dir.path());
    println!("toy corpus generated in {:.0}s", t.elapsed().as_secs_f64());
    let c5 = criterion_5(dir.path(), &manifest);
    let trained = c5.is_ok();
    report(5, "toy end-to-end", c5, &mut failures);
    let c7 = if trained { criterion_7(dir.path(), &manifest) } else { Err("no trained model".into()) };
    report(7, "robustness sweep", c7, &mut failures);
    report(8, "frequency gap", criterion_8(dir.path(), &manifest), &mut failures);
    report(6, "ablation ordering", criterion_6(dir.path(), &manifest), &mut failures);

    println!("{} of 8 criteria passed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
