//! Generators and fixtures shared by the integration tests.
#![allow(dead_code)]

use smart_kit::eval::EvalRecord;
use smart_kit::rng::Rng;
use smart_kit::template::{Detection, LabeledBox, ModelInput, OcrSpan};
use smart_kit::types::{BBox, Modality, OptionLabel, PuzzleEntry, PuzzleManifest, TypeList};

pub fn bb(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box(rng: &mut Rng) -> BBox {
    let x1 = rng.below(500) as u32;
    let y1 = rng.below(500) as u32;
    bb(
        x1,
        y1,
        x1 + 1 + rng.below(300) as u32,
        y1 + 1 + rng.below(300) as u32,
    )
}

const TEXT_POOL: &[&str] = &[
    "a", "b", "Z", "0", "7", " ", " ", ".", ",", ";", ":", "?", "(", ")", "]", "[", "-", "'", "é", "猫",
    "none", "dog", "Options", "Question", "type", "A: ", "; B: ", "x1",
];

/// Random text drawn from a pool rich in template punctuation.
pub fn random_text(rng: &mut Rng, max_pieces: usize, allow_bracket: bool) -> String {
    let n = rng.below(max_pieces + 1);
    let mut s = String::new();
    while s.chars().count() < n {
        let piece = TEXT_POOL[rng.below(TEXT_POOL.len())];
        if !allow_bracket && piece.contains('[') {
            continue;
        }
        s.push_str(piece);
    }
    s
}

fn random_items(rng: &mut Rng) -> Vec<LabeledBox> {
    let n = [0, 0, 1, 2, 5, 9][rng.below(6)];
    (0..n)
        .map(|_| {
            let mut label = random_text(rng, 8, false);
            if label.is_empty() {
                label.push('q');
            }
            LabeledBox {
                label,
                bbox: random_box(rng),
            }
        })
        .collect()
}

/// A random input for which the round trip is guaranteed, with the number
/// of rejected candidates.
pub fn random_model_input(rng: &mut Rng, types: &TypeList) -> (ModelInput, usize) {
    let mut rejected = 0;
    loop {
        let mi = ModelInput {
            qtype: types.by_index(rng.below(types.len())).unwrap(),
            objects: random_items(rng),
            ocr: random_items(rng),
            question: random_text(rng, 40, true),
            options: std::array::from_fn(|_| random_text(rng, 6, true)),
        };
        if mi.is_round_trip_safe() {
            return (mi, rejected);
        }
        rejected += 1;
    }
}

/// The five-animal spatial reasoning example with concrete coordinates.
pub fn animal_fixture(types: &TypeList) -> (ModelInput, &'static str) {
    let dets = [
        ("monkey", bb(10, 12, 60, 70), 0.95),
        ("bird", bb(80, 15, 120, 52), 0.90),
        ("tiger", bb(140, 10, 220, 90), 0.85),
        ("fish", bb(240, 30, 290, 60), 0.80),
        ("chick", bb(300, 20, 340, 58), 0.75),
    ]
    .map(|(n, b, s)| Detection {
        class_name: n.into(),
        bbox: b,
        score: s,
    });
    let ocr = [
        ("A", bb(12, 100, 24, 114)),
        ("B", bb(72, 100, 84, 114)),
        ("C", bb(142, 100, 154, 114)),
        ("D", bb(242, 100, 254, 114)),
        ("E", bb(302, 100, 314, 114)),
    ]
    .map(|(t, b)| OcrSpan {
        text: t.into(),
        bbox: b,
        score: 0.99,
    });
    let question = "In a made-up world animals come in any size, for example the monkey and the bird. \
                    Sort them from smallest to largest. Which label belongs to the middle animal?";
    let mi = ModelInput::assemble(
        types.get("spatial reasoning").unwrap(),
        &dets,
        &ocr,
        question,
        ["A", "B", "C", "D", "E"].map(String::from),
    );
    let expected = "Question type: spatial reasoning. \
        Objects: monkey[10,12,60,70], bird[80,15,120,52], tiger[140,10,220,90], fish[240,30,290,60], chick[300,20,340,58]. \
        Ocr text:A[12,100,24,114], B[72,100,84,114], C[142,100,154,114], D[242,100,254,114], E[302,100,314,114]. \
        Question: In a made-up world animals come in any size, for example the monkey[10,12,60,70] and the bird[80,15,120,52]. \
        Sort them from smallest to largest. Which label belongs to the middle animal? \
        Options: A: A; B: B; C: C; D: D; E: E.";
    (mi, expected)
}

pub fn random_option(rng: &mut Rng) -> OptionLabel {
    OptionLabel::from_index(rng.below(5)).unwrap()
}

/// A manifest of `n_puzzles` with random weights and modalities, and `n`
/// records over it with unique keys.
pub fn random_record_set(rng: &mut Rng, n_puzzles: usize, n: usize) -> (PuzzleManifest, Vec<EvalRecord>) {
    let manifest = PuzzleManifest::from_entries((0..n_puzzles as u64).map(|id| {
        (
            id,
            PuzzleEntry {
                weight: rng.uniform(0.01, 10.0),
                modality: if rng.below(2) == 0 {
                    Modality::Text
                } else {
                    Modality::Vl
                },
            },
        )
    }))
    .unwrap();
    let records = (0..n as u64)
        .map(|i| EvalRecord {
            puzzle_id: rng.below(n_puzzles) as u64,
            instance_id: i,
            predicted: random_option(rng),
            answer: random_option(rng),
        })
        .collect();
    (manifest, records)
}

/// Term-by-term `100 * sum(w * acc) / sum(w)` in record order.
pub fn brute_force_wosa(records: &[EvalRecord], weight: impl Fn(u64) -> f64) -> f64 {
    let terms: Vec<(f64, f64)> = records
        .iter()
        .map(|r| {
            (
                weight(r.puzzle_id),
                if r.predicted == r.answer { 1.0 } else { 0.0 },
            )
        })
        .collect();
    let num: f64 = terms.iter().map(|(w, a)| w * a).sum();
    let den: f64 = terms.iter().map(|(w, _)| w).sum();
    100.0 * num / den
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
