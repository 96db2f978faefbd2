//! Fuses detections, OCR spans and a question into the model-input
//! template, then parses it back.
//!
//! `cargo run --example build_template`

use smart_kit::template::{build_model_input, parse_detections, parse_model_input, parse_ocr, ModelInput};
use smart_kit::types::TypeList;

const DETECTIONS: &str = r#"{"image": "p7.png", "width": 400, "height": 200, "detections": [
  {"class": "bird",   "bbox": [80, 15, 120, 52],  "score": 0.91},
  {"class": "monkey", "bbox": [10, 12, 60, 70],   "score": 0.97},
  {"class": "fish",   "bbox": [390, 30, 460, 60], "score": 0.64}
]}"#;

const OCR: &str = r#"{"image": "p7.png", "spans": [
  {"text": "A", "bbox": [12, 100, 24, 114], "score": 0.99},
  {"text": "B", "bbox": [72, 100, 84, 114], "score": 0.98}
]}"#;

fn main() -> smart_kit::Result<()> {
    let types = TypeList::default();
    let dets = parse_detections(DETECTIONS, "detections")?;
    let ocr = parse_ocr(OCR, "ocr")?;
    // the fish box is clamped to the 400 px wide image
    println!("fish box after clamping: {}", dets.detections[2].bbox);

    let mi = ModelInput::assemble(
        types.get("spatial reasoning")?,
        &dets.detections,
        &ocr.spans,
        "Is the monkey bigger than the bird?",
        ["yes", "no", "same size", "cannot tell", "both"].map(String::from),
    );
    let text = build_model_input(&mi);
    println!("{text}");

    let back = parse_model_input(&text, &types)?;
    assert_eq!(back, mi);
    println!(
        "round trip ok: {} objects, {} OCR spans",
        back.objects.len(),
        back.ocr.len()
    );

    let empty = ModelInput::assemble(types.get("logic")?, &[], &[], "Who is lying?", mi.options.clone());
    println!("{}", build_model_input(&empty));

    match parse_model_input("Question type: logic. Objects: none", &types) {
        Err(e) => println!("truncated input: {e}"),
        Ok(_) => unreachable!("truncated template parsed"),
    }
    Ok(())
}
