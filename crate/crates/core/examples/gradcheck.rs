//! Verifies the hand-written adapter and head gradients against central
//! finite differences on random small encoders.
//!
//! `cargo run --release --example gradcheck -- [cases] [eps]`

use smart_kit::encoder::gradcheck::{run_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};

fn main() -> smart_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let cases = args.next().map_or(20, |a| a.parse().expect("integer case count"));
    let eps = args
        .next()
        .map_or(DEFAULT_EPS, |a| a.parse().expect("numeric eps"));

    let results = run_suite(cases, 7, eps)?;
    for (i, r) in results.iter().enumerate() {
        let entry = r.tensors.iter().map(|t| t.max_entry_error).fold(0.0, f64::max);
        println!(
            "case {i:2}: {:5} entries in {:3} tensors  max rel err {:.2e} at {}  (worst single entry {:.2e})",
            r.checked,
            r.tensors.len(),
            r.max_rel_error,
            r.worst_param,
            entry
        );
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "worst {worst:.2e}, tolerance {DEFAULT_TOLERANCE:.0e}: {}",
        if worst <= DEFAULT_TOLERANCE { "ok" } else { "FAIL" }
    );
    Ok(())
}
