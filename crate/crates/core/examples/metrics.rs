//! Detection metrics on a small scored set.
//!
//! cargo run --release --example metrics

use synthdetect::evaluation::MetricsRow;
use synthdetect::metrics::{accuracy, average_precision, roc_auc, tpr_at_fpr};

fn main() -> synthdetect::Result<()> {
    // true = synthetic
    let labels = [false, false, false, false, true, false, true, true, true, true];
    let scores = [0.05, 0.2, 0.3, 0.45, 0.5, 0.55, 0.6, 0.6, 0.9, 0.95];

    println!("AP            {:.4}", average_precision(&labels, &scores)?);
    println!("ROC-AUC       {:.4}", roc_auc(&labels, &scores)?);
    println!("TPR@10%FPR    {:.4}", tpr_at_fpr(&labels, &scores, 0.10)?);
    println!("TPR@1%FPR     {:.4}", tpr_at_fpr(&labels, &scores, 0.01)?);
    println!("accuracy@0.5  {:.4}", accuracy(&labels, &scores, 0.5)?);

    let row = MetricsRow::compute("demo", &labels, &scores, 0.5);
    println!("{}", serde_json::to_string_pretty(&row)?);
    Ok(())
}
