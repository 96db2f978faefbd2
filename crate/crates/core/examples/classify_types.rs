//! Votes a question type for each puzzle from sampled instance questions,
//! using the keyword backend or any closure standing in for a model.
//!
//! `cargo run --example classify_types`

use smart_kit::qtype::{build_type_prompt, classify_all, parse_type_response, BackendError, RuleBackend};
use smart_kit::types::{PuzzleInstance, TypeList};

fn instance(puzzle_id: u64, instance_id: u64, question: &str) -> PuzzleInstance {
    PuzzleInstance {
        puzzle_id,
        instance_id,
        image_path: format!("{puzzle_id}_{instance_id}.png").into(),
        question: question.into(),
        options: ["1", "2", "3", "4", "5"].map(String::from),
        answer: None,
    }
}

fn main() -> smart_kit::Result<()> {
    let types = TypeList::default();
    let questions = [
        (1, "How many triangles can you see in the picture?"),
        (2, "What is the sum of the two hidden numbers?"),
        (3, "Which piece is directly above the star?"),
    ];
    let instances: Vec<PuzzleInstance> = questions
        .iter()
        .flat_map(|&(p, q)| (0..30).map(move |i| instance(p, i, q)))
        .collect();

    println!("{}\n", build_type_prompt(questions[0].1, &types)?);

    for r in classify_all(&RuleBackend, &instances, 10, 1, &types)? {
        println!("puzzle {}: {:<18} tally {:?}", r.puzzle_id, r.qtype, r.tally);
    }

    // a model that rambles: the first listed type found in its reply wins
    let chatty =
        |_: &str| -> Result<String, BackendError> { Ok("I think this is arithmetic, maybe algebra.".into()) };
    let records = classify_all(&chatty, &instances, 10, 1, &types)?;
    println!("\nchatty backend -> {}", records[0].qtype);
    println!(
        "parse(\"Spatial Reasoning.\") = {:?}",
        parse_type_response("Spatial Reasoning.", &types).map(|t| t.to_string())
    );
    Ok(())
}
