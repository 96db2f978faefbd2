//! Renders a small detection dataset from the built-in glyph library, then
//! reads one label file back into pixel boxes.
//!
//! `cargo run --example synth_scenes -- [out_dir] [count]`

use std::path::PathBuf;

use smart_kit::scene::{parse_label_line, synth_dataset, IconLibrary, SceneSpec};

fn main() -> smart_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/synth_scenes".into()));
    let count = args.next().map_or(8, |a| a.parse().expect("integer count"));

    // a real icon set would come from scene::load_icon_library(dir)
    let lib = IconLibrary::procedural(3);
    lib.write_to_dir(&out.join("icons"))?;

    let spec = SceneSpec::default();
    let index = synth_dataset(count, &spec, &lib, 7, &out.join("scenes"), 0)?;
    println!(
        "{} scenes, {} icons placed, {} skipped, classes {:?}",
        index.scenes.len(),
        index.total_annotations,
        index.total_skipped,
        index.classes
    );

    let first = &index.scenes[0];
    let labels =
        std::fs::read_to_string(out.join("scenes").join(&first.label)).map_err(|e| smart_kit::Error::Io {
            path: first.label.clone().into(),
            source: e,
        })?;
    println!("{}:", first.label);
    for line in labels.lines() {
        let (class, [x1, y1, x2, y2]) = parse_label_line(line, spec.width, spec.height)?;
        println!(
            "  {line:<40} -> {} [{x1:.0},{y1:.0},{x2:.0},{y2:.0}]",
            index.classes[class]
        );
    }
    Ok(())
}
