//! Robustness curves over the JPEG and blur grids, written as CSV and
//! rendered to SVG through the command-line `plot` subcommand.
//!
//! cargo run --release --example robustness [-- out_dir]

mod common;

use std::path::PathBuf;

use synthdetect::augment::TransformKind;
use synthdetect::evaluation::{parse_grid, robustness_sweep, write_robustness_csv, SweepOptions};
use synthdetect::manifest::Split;

fn main() -> synthdetect::Result<()> {
    let toy = common::toy_corpus(120, 224)?;
    let det = common::quick_detector(&toy)?;
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| toy.dir.path().to_path_buf());
    std::fs::create_dir_all(&out).map_err(|e| synthdetect::Error::io("creating output dir", e))?;

    let opts = SweepOptions {
        include_identity: true,
        ..Default::default()
    };
    let mut csvs = Vec::new();
    for (kind, grid) in [(TransformKind::Jpeg, "75:95:5"), (TransformKind::Blur, "0.5:2.5:5")] {
        let grid = parse_grid(kind, grid)?;
        let points = robustness_sweep(&toy.manifest, Split::Test, &det, kind, &grid, &opts)?;
        for p in &points {
            println!("{kind} {:>6.2} AP {:.4} acc {:.4}", p.param, p.ap.unwrap_or(f64::NAN), p.accuracy.unwrap_or(f64::NAN));
        }
        let path = out.join(format!("robustness_{kind}.csv"));
        write_robustness_csv(&points, &path)?;
        csvs.push(path);
    }

    let svg = out.join("robustness.svg");
    let mut argv = vec!["synthdetect".to_string(), "plot".into()];
    for c in &csvs {
        argv.extend(["--input".into(), c.display().to_string()]);
    }
    argv.extend(["--out".into(), svg.display().to_string()]);
    let res = synthdetect::cli::run(argv);
    println!("plot: exit {} ({})", res.exit_code, res.summary);
    Ok(())
}
