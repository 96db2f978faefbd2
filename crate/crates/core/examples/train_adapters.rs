//! Trains counting adapters on synthetic scenes and compares them with a
//! head-only baseline on the same frozen backbone.
//!
//! `cargo run --release --example train_adapters -- [scenes] [steps]`

use std::time::Instant;

use smart_kit::encoder::{
    make_counting_task, train, AdaptedEncoder, CountingTaskSpec, EncoderConfig, TrainConfig,
};
use smart_kit::scene::IconLibrary;
use smart_kit::types::TypeList;

fn main() -> smart_kit::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let scenes = args.next().unwrap_or(2000);
    let steps = args.next().unwrap_or(2000);

    let lib = IconLibrary::procedural(4);
    let types = TypeList::default();
    let cfg = EncoderConfig::default();
    let data = make_counting_task(&lib, scenes, 1, &cfg, &types, &CountingTaskSpec::default())?;
    println!("{} train / {} val scenes", data.train.len(), data.val.len());

    for train_adapters in [false, true] {
        let t0 = Instant::now();
        let mut enc = AdaptedEncoder::init(&cfg, &types, 0)?;
        let tc = TrainConfig {
            steps,
            train_adapters,
            ..TrainConfig::default()
        };
        let r = train(&mut enc, &data, &tc)?;
        println!(
            "{:<13} loss {:.3} -> {:.3}  train {:.1}%  val {:.1}%  backbone unchanged: {}  ({:.0?})",
            if train_adapters {
                "adapters+head"
            } else {
                "head only"
            },
            r.initial_loss,
            r.final_loss,
            100.0 * r.train_accuracy,
            100.0 * r.val_accuracy.unwrap_or(f64::NAN),
            r.backbone_checksum_before == r.backbone_checksum_after,
            t0.elapsed()
        );
    }
    Ok(())
}
