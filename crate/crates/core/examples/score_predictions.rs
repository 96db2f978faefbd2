//! Scores predictions with per-puzzle weights and prints the text, vision
//! and overall split report.
//!
//! `cargo run --example score_predictions`

use smart_kit::eval::{parse_predictions, render_report, split_report, wosa, ReportFormat};
use smart_kit::types::parse_manifest;

const MANIFEST: &str = r#"[
  {"puzzle_id": 1, "weight": 1.0, "modality": "text"},
  {"puzzle_id": 2, "weight": 2.0, "modality": "vl"},
  {"puzzle_id": 3, "weight": 3.0, "modality": "vl"}
]"#;

const PREDICTIONS: &str = r#"{"puzzle_id": 1, "instance_id": 0, "predicted": "A", "answer": "A"}
{"puzzle_id": 2, "instance_id": 0, "predicted": "C", "answer": "B"}
{"puzzle_id": 3, "instance_id": 0, "predicted": "E", "answer": "E"}
{"puzzle_id": 3, "instance_id": 1, "predicted": "D", "answer": "A"}
"#;

fn main() -> smart_kit::Result<()> {
    let manifest = parse_manifest(MANIFEST, "manifest")?;
    let records = parse_predictions(PREDICTIONS, "predictions", &manifest)?;
    println!("weighted accuracy over all: {:.4}\n", wosa(&records, &manifest)?);

    let report = split_report(&records, &manifest)?;
    print!("{}", render_report(&report, ReportFormat::Table, "example"));
    print!("{}", render_report(&report, ReportFormat::Json, "example"));

    let bad = r#"{"puzzle_id": 9, "instance_id": 0, "predicted": "A", "answer": "B"}"#;
    if let Err(e) = parse_predictions(bad, "bad", &manifest) {
        println!("unknown puzzle rejected: {e}");
    }
    Ok(())
}
