//! Property tests for the cross-module invariants.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use smart_kit::encoder::model::cross_entropy;
use smart_kit::encoder::{trainable_param_formula, AdaptedEncoder, EncoderConfig, Image};
use smart_kit::eval::{option_accuracy, split_report, wosa, EvalRecord};
use smart_kit::qtype::{build_type_prompt, majority_vote, VoteTally};
use smart_kit::rng::{derive_seed, Rng};
use smart_kit::scene::{
    compose_scene, format_labels, iou, parse_label_line, Annotation, IconLibrary, SceneSpec,
};
use smart_kit::template::{
    annotate_question, build_model_input, order_objects, parse_model_input, Detection,
};
use smart_kit::types::{BBox, Modality, PuzzleEntry, PuzzleManifest, TypeList};

use common::{brute_force_wosa, random_record_set, rel_err};

fn arb_box(max: u32) -> impl Strategy<Value = BBox> {
    (0..max, 0..max, 1..max, 1..max).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_detection() -> impl Strategy<Value = Detection> {
    (
        prop::sample::select(vec!["cat", "dog", "bird", "fish"]),
        arb_box(400),
        0u32..4,
    )
        .prop_map(|(c, bbox, s)| Detection {
            class_name: c.into(),
            bbox,
            // few distinct scores so the tie-breaks are exercised
            score: f64::from(s) / 4.0,
        })
}

/// Strips every `[...]` group.
fn strip_brackets(s: &str) -> String {
    let mut out = String::new();
    let mut depth = 0;
    for c in s.chars() {
        match c {
            '[' => depth += 1,
            ']' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prng_streams_repeat(seed: u64) {
        let mut a = Rng::new(seed);
        let mut b = Rng::new(seed);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_seeds_differ(master: u64, i in 0u64..1 << 32, j in 0u64..1 << 32) {
        prop_assume!(i != j);
        prop_assert_ne!(derive_seed(master, i), derive_seed(master, j));
    }

    #[test]
    fn degenerate_boxes_rejected(x in 0u32..1000, y in 0u32..1000, dx in 0u32..50, dy in 0u32..50) {
        prop_assert!(BBox::new(x, y, x, y + dy).is_err());
        prop_assert!(BBox::new(x, y, x + dx, y).is_err());
        prop_assert!(BBox::new(x + dx, y, x, y + 1).is_err() || dx == 0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(300), b in arb_box(300)) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn label_lines_denormalize_within_half_pixel(
        boxes in prop::collection::vec((0usize..5, arb_box(150)), 1..10),
        w in 300u32..700,
        h in 300u32..700,
    ) {
        let anns: Vec<Annotation> = boxes.iter().map(|&(class_id, bbox)| Annotation { class_id, bbox }).collect();
        let text = format_labels(&anns, w, h);
        prop_assert_eq!(text.lines().count(), anns.len());
        for (line, ann) in text.lines().zip(&anns) {
            for v in line.split(' ').skip(1) {
                let v: f64 = v.parse().unwrap();
                prop_assert!((0.0..=1.0).contains(&v), "{line}");
            }
            let (class, coords) = parse_label_line(line, w, h).unwrap();
            prop_assert_eq!(class, ann.class_id);
            for (got, want) in coords.iter().zip(ann.bbox.coords()) {
                prop_assert!((got - f64::from(want)).abs() <= 0.5, "{line}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn order_objects_is_a_sorted_permutation(dets in prop::collection::vec(arb_detection(), 0..12)) {
        let ordered = order_objects(&dets);
        prop_assert_eq!(ordered.len(), dets.len());
        let key = |d: &Detection| format!("{}{:?}{}", d.class_name, d.bbox.coords(), d.score);
        let mut a: Vec<String> = dets.iter().map(key).collect();
        let mut b: Vec<String> = ordered.iter().map(key).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert!(ordered.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn annotation_only_inserts_brackets(
        words in prop::collection::vec(prop::sample::select(vec!["the", "cat", "Dog", "birds", "fish,", "and", "?", "cat's"]), 0..15),
        dets in prop::collection::vec(arb_detection(), 0..6),
    ) {
        let question = words.join(" ");
        let annotated = annotate_question(&question, &dets);
        prop_assert!(annotated.len() >= question.len());
        prop_assert_eq!(strip_brackets(&annotated), question);
        // at most one box per detected class
        let classes: std::collections::BTreeSet<_> = dets.iter().map(|d| &d.class_name).collect();
        prop_assert!(annotated.matches('[').count() <= classes.len());
    }

    #[test]
    fn template_round_trips(seed: u64) {
        let types = TypeList::default();
        let (mi, _) = common::random_model_input(&mut Rng::new(seed), &types);
        let text = build_model_input(&mi);
        prop_assert_eq!(parse_model_input(&text, &types).unwrap(), mi);
    }

    #[test]
    fn template_markers_appear_once_in_order(seed: u64) {
        let types = TypeList::default();
        let (mut mi, _) = common::random_model_input(&mut Rng::new(seed), &types);
        // keep marker words out of the free text so counting is meaningful
        mi.question = mi.question.replace(':', "");
        for o in mi.options.iter_mut().chain(mi.objects.iter_mut().map(|b| &mut b.label)).chain(mi.ocr.iter_mut().map(|b| &mut b.label)) {
            *o = o.replace(':', "");
        }
        let text = build_model_input(&mi);
        let mut last = 0;
        for marker in ["Question type:", "Objects:", "Ocr text:", "Question:", "Options:"] {
            prop_assert_eq!(text.matches(marker).count(), 1, "{} in {}", marker, text);
            let at = text.find(marker).unwrap();
            prop_assert!(at >= last);
            last = at;
        }
    }

    #[test]
    fn vote_ignores_order(votes in prop::collection::vec(0usize..8, 1..40), seed: u64) {
        // index 7 stands for an unparseable response
        let types = TypeList::default();
        let tally_of = |vs: &[usize]| {
            let mut t = VoteTally::new(&types);
            for &v in vs {
                t.record(types.by_index(v).as_ref());
            }
            t
        };
        let mut shuffled = votes.clone();
        let mut rng = Rng::new(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i + 1));
        }
        let (a, b) = (tally_of(&votes), tally_of(&shuffled));
        prop_assert_eq!(a.total(), votes.len());
        prop_assert_eq!(a.parsed() + a.unparseable(), a.total());
        prop_assert_eq!(majority_vote(&a, &types).ok(), majority_vote(&b, &types).ok());
    }

    #[test]
    fn vote_scales(counts in prop::collection::vec(0usize..20, 7), factor in 1usize..10) {
        let types = TypeList::default();
        let max = *counts.iter().max().unwrap();
        prop_assume!(max > 0 && counts.iter().filter(|&&c| c == max).count() == 1);
        let build = |f: usize| {
            let mut t = VoteTally::new(&types);
            for (name, &c) in types.names().zip(&counts) {
                t.add(name, c * f).unwrap();
            }
            t
        };
        prop_assert_eq!(majority_vote(&build(1), &types).unwrap(), majority_vote(&build(factor), &types).unwrap());
    }

    #[test]
    fn type_prompt_is_injective(a in "[a-z?][a-z ?]{0,20}", b in "[a-z?][a-z ?]{0,20}") {
        prop_assume!(a != b);
        let types = TypeList::default();
        prop_assert_ne!(build_type_prompt(&a, &types).unwrap(), build_type_prompt(&b, &types).unwrap());
    }

    #[test]
    fn softmax_loss_is_finite_for_large_logits(
        logits in prop::array::uniform5(-1e4f64..1e4),
        target in 0usize..5,
    ) {
        let (loss, grad) = cross_entropy(&ndarray::Array1::from(logits.to_vec()), target);
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(grad.iter().all(|g| g.is_finite()));
        prop_assert!(grad.sum().abs() < 1e-9);
    }
}

fn arb_encoder_config() -> impl Strategy<Value = EncoderConfig> {
    (
        1usize..4,
        2usize..5,
        2usize..4,
        1usize..4,
        1usize..3,
        1usize..6,
        1usize..3,
    )
        .prop_map(
            |(heads, head_dim, grid, patch, layers, bottleneck, mlp_ratio)| EncoderConfig {
                image_size: grid * patch,
                channels: 1,
                patch_size: patch,
                width: heads * head_dim,
                layers,
                heads,
                mlp_ratio,
                bottleneck,
                adapter_scale: 1.0,
            },
        )
}

proptest! {
    // encoder construction is the slow part; fewer cases suffice
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trainable_params_match_formula(cfg in arb_encoder_config(), n_types in 1usize..8, seed: u64) {
        let names: Vec<String> = (0..n_types).map(|i| format!("type{i}")).collect();
        let types = TypeList::new(&names).unwrap();
        let enc = AdaptedEncoder::init(&cfg, &types, seed).unwrap();
        prop_assert_eq!(enc.count_trainable_params(), trainable_param_formula(cfg.layers, n_types, cfg.width, cfg.bottleneck));
        prop_assert_eq!(enc.num_adapters(), cfg.layers * n_types);
    }

    #[test]
    fn fresh_adapters_are_the_identity_and_routing_isolates(cfg in arb_encoder_config(), seed: u64) {
        let types = TypeList::new(["a", "b", "c"]).unwrap();
        let mut enc = AdaptedEncoder::init(&cfg, &types, seed).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        let img = Image::from_shape_simple_fn((1, cfg.image_size, cfg.image_size), || rng.next_f64());
        let base = enc.forward_backbone(&img).unwrap();
        for t in types.iter() {
            prop_assert_eq!(enc.forward(&img, &t).unwrap().map(f64::to_bits), base.map(f64::to_bits));
        }
        let before = enc.forward(&img, &types.get("a").unwrap()).unwrap();
        for l in 0..cfg.layers {
            for (_, v) in enc.adapter_mut(l, 1).tensors_mut() {
                v.iter_mut().for_each(|x| *x = rng.uniform(-3.0, 3.0));
            }
        }
        let after = enc.forward(&img, &types.get("a").unwrap()).unwrap();
        prop_assert_eq!(before.map(f64::to_bits), after.map(f64::to_bits));
        prop_assert_ne!(enc.forward(&img, &types.get("b").unwrap()).unwrap(), before);
    }

    #[test]
    fn scenes_without_skips_respect_the_overlap_cap(seed: u64, max_iou in 0.0f64..0.5) {
        let spec = SceneSpec { width: 160, height: 160, n_min: 1, n_max: 5, size_min: 16, size_max: 48, max_iou, seed };
        let lib = IconLibrary::procedural(1);
        let scene = compose_scene(&spec, &lib, &mut Rng::new(seed)).unwrap();
        prop_assume!(scene.skipped == 0);
        for (i, a) in scene.annotations.iter().enumerate() {
            prop_assert!(a.bbox.fits_in(spec.width, spec.height));
            for b in &scene.annotations[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= max_iou);
            }
        }
    }
}

fn record_set() -> impl Strategy<Value = (PuzzleManifest, Vec<EvalRecord>)> {
    (any::<u64>(), 1usize..30, 1usize..300)
        .prop_map(|(seed, puzzles, n)| random_record_set(&mut Rng::new(seed), puzzles, n))
        .prop_filter("records cite manifest puzzles", |(m, r)| {
            r.iter().all(|r| m.get(r.puzzle_id).is_some())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wosa_matches_brute_force((manifest, records) in record_set()) {
        let fast = wosa(&records, &manifest).unwrap();
        let slow = brute_force_wosa(&records, |p| manifest.weight(p).unwrap());
        prop_assert!(rel_err(fast, slow) <= 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn wosa_is_scale_invariant((manifest, records) in record_set(), c in 1e-3f64..1e3) {
        let scaled = PuzzleManifest::from_entries(
            manifest.iter().map(|(id, e)| (id, PuzzleEntry { weight: e.weight * c, ..*e })),
        ).unwrap();
        let a = wosa(&records, &manifest).unwrap();
        let b = wosa(&records, &scaled).unwrap();
        prop_assert!(rel_err(a, b) <= 1e-12 || (a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn fixing_a_wrong_answer_raises_wosa((manifest, records) in record_set(), pick: prop::sample::Index) {
        let wrong: Vec<usize> = (0..records.len()).filter(|&i| !records[i].correct()).collect();
        prop_assume!(!wrong.is_empty());
        let i = wrong[pick.index(wrong.len())];
        let mut fixed = records.clone();
        fixed[i].predicted = fixed[i].answer;
        prop_assert!(wosa(&fixed, &manifest).unwrap() > wosa(&records, &manifest).unwrap());
    }

    #[test]
    fn union_lies_between_splits((manifest, records) in record_set()) {
        let r = split_report(&records, &manifest).unwrap();
        if let (Some(t), Some(v)) = (r.text_wosa, r.vl_wosa) {
            let slack = 1e-9;
            prop_assert!(t.min(v) - slack <= r.tot_wosa && r.tot_wosa <= t.max(v) + slack, "{t} {v} {}", r.tot_wosa);
        }
        prop_assert_eq!(r.counts.total, records.len());
    }

    #[test]
    fn option_accuracy_is_uniform_wosa((manifest, records) in record_set()) {
        let uniform = PuzzleManifest::from_entries(
            manifest.iter().map(|(id, _)| (id, PuzzleEntry { weight: 1.0, modality: Modality::Vl })),
        ).unwrap();
        let a = option_accuracy(&records).unwrap();
        let b = wosa(&records, &uniform).unwrap();
        prop_assert!(rel_err(a, b) <= 1e-12, "{a} vs {b}");
        let by_hand = 100.0 * records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64;
        prop_assert!(rel_err(a, by_hand) <= 1e-12);
    }
}

#[test]
fn rule_classification_is_deterministic() {
    use smart_kit::qtype::{classify_all, RuleBackend};
    use smart_kit::types::PuzzleInstance;
    let questions = [
        "How many cats?",
        "What is the sum of 3 and 4?",
        "Which is left of the tree?",
        "Who lies?",
    ];
    let instances: Vec<PuzzleInstance> = (0..40u64)
        .map(|i| PuzzleInstance {
            puzzle_id: i % 4,
            instance_id: i,
            image_path: format!("{i}.png").into(),
            question: questions[(i as usize * 7) % 4].into(),
            options: ["1", "2", "3", "4", "5"].map(String::from),
            answer: None,
        })
        .collect();
    let types = TypeList::default();
    let run = || classify_all(&RuleBackend, &instances, 5, 11, &types).unwrap();
    let first = run();
    assert_eq!(first, run());
    let totals: BTreeMap<u64, usize> = first
        .iter()
        .map(|r| (r.puzzle_id, r.tally.values().sum::<usize>() + r.unparseable))
        .collect();
    assert!(totals.values().all(|&t| t == 5), "{totals:?}");
}
