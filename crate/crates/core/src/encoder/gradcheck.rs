//! Central finite-difference verification of the analytic adapter and head
//! gradients. The numerical side uses only the forward pass.

use ndarray::Array1;
use serde::Serialize;

use super::config::{EncoderConfig, NUM_OPTIONS};
use super::model::{cross_entropy, AdaptedEncoder, Gradients, Image, Sample};
use crate::error::Result;
use crate::rng::{derive_seed, Rng};
use crate::types::TypeList;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor, so an all-zero gradient compares absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)` for one entry.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `||a - n|| / max(||a||, ||n||, REL_FLOOR)` over one parameter tensor.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(REL_FLOOR)
}

/// One named parameter tensor, e.g. `adapter[1][0].up` or `head.w`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub rel_error: f64,
    pub grad_norm: f64,
    /// Largest per-entry relative error, for diagnostics only.
    pub max_entry_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    /// Scalar entries compared.
    pub checked: usize,
    /// Worst tensor-wise relative error.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub tensors: Vec<TensorCheck>,
}

/// Forward-only mean batch loss, routing every sample through its adapter.
fn batch_loss(enc: &AdaptedEncoder, batch: &[&Sample]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let logits = enc.forward(&s.image, &s.qtype).expect("valid gradcheck sample");
            cross_entropy(&Array1::from(logits.to_vec()), s.target).0
        })
        .sum();
    total / batch.len() as f64
}

/// Compares the gradient of the head and of every adapter that received one
/// against `(L(p + eps) - L(p - eps)) / 2 eps`, entry by entry, and reports
/// the relative error per parameter tensor.
pub fn check_gradients(enc: &AdaptedEncoder, batch: &[&Sample], eps: f64) -> Result<GradCheckResult> {
    let (_, grads) = enc.loss_and_grads(batch)?;
    let mut probe = enc.clone();
    let mut tensors = Vec::new();

    let mut compare = |name: String, analytic: &[f64], param: &dyn Fn(usize) -> Param| {
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|k| central_difference(&mut probe, batch, eps, param(k)))
            .collect();
        let max_entry_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        tensors.push(TensorCheck {
            name,
            entries: analytic.len(),
            rel_error: tensor_relative_error(analytic, &numeric),
            grad_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            max_entry_error,
        });
    };

    compare(
        "head.w".into(),
        grads.head.w.as_slice().expect("standard layout"),
        &Param::HeadW,
    );
    compare(
        "head.b".into(),
        grads.head.b.as_slice().expect("standard layout"),
        &Param::HeadB,
    );
    for (t, layers) in adapter_entries(&grads) {
        for (l, g) in layers.iter().enumerate() {
            for (ti, (tensor, values)) in g.tensors().into_iter().enumerate() {
                compare(format!("adapter[{l}][{t}].{tensor}"), values, &|k| {
                    Param::Adapter {
                        layer: l,
                        qtype: t,
                        tensor: ti,
                        k,
                    }
                });
            }
        }
    }

    let worst = tensors
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("the head is always checked");
    Ok(GradCheckResult {
        checked: tensors.iter().map(|t| t.entries).sum(),
        max_rel_error: worst.rel_error,
        worst_param: worst.name.clone(),
        tensors,
    })
}

fn adapter_entries(grads: &Gradients) -> Vec<(usize, &Vec<super::model::Adapter>)> {
    grads.adapters.iter().map(|(t, v)| (*t, v)).collect()
}

#[derive(Debug, Clone, Copy)]
enum Param {
    HeadW(usize),
    HeadB(usize),
    Adapter {
        layer: usize,
        qtype: usize,
        tensor: usize,
        k: usize,
    },
}

fn param_mut(enc: &mut AdaptedEncoder, p: Param) -> &mut f64 {
    match p {
        Param::HeadW(k) => &mut enc.head_mut().w.as_slice_mut().expect("standard layout")[k],
        Param::HeadB(k) => &mut enc.head_mut().b[k],
        Param::Adapter {
            layer,
            qtype,
            tensor,
            k,
        } => enc.adapter_mut(layer, qtype).param_mut(tensor, k),
    }
}

fn central_difference(probe: &mut AdaptedEncoder, batch: &[&Sample], eps: f64, p: Param) -> f64 {
    let orig = *param_mut(probe, p);
    *param_mut(probe, p) = orig + eps;
    let plus = batch_loss(probe, batch);
    *param_mut(probe, p) = orig - eps;
    let minus = batch_loss(probe, batch);
    *param_mut(probe, p) = orig;
    (plus - minus) / (2.0 * eps)
}

const AMP: f64 = 0.2;

/// A small random encoder with every trainable parameter randomized (so
/// adapter gradients are non-trivial) and a mixed-type batch.
pub fn random_case(seed: u64) -> Result<(AdaptedEncoder, Vec<Sample>)> {
    let mut rng = Rng::new(seed);
    let heads = rng.range_inclusive(1, 3);
    let patch_size = rng.range_inclusive(2, 4);
    let cfg = EncoderConfig {
        image_size: patch_size * rng.range_inclusive(2, 3),
        channels: [1, 3][rng.below(2)],
        patch_size,
        // very narrow layer norms are too curved for eps = 1e-3
        width: heads * rng.range_inclusive(8usize.div_ceil(heads), 16 / heads),
        layers: rng.range_inclusive(1, 3),
        heads,
        mlp_ratio: rng.range_inclusive(1, 4),
        bottleneck: rng.range_inclusive(1, 4),
        adapter_scale: rng.uniform(0.5, 2.0),
    };
    let types = TypeList::new(["counting", "logic", "algebra"])?;
    let mut enc = AdaptedEncoder::init(&cfg, &types, derive_seed(seed, 1))?;
    for l in 0..cfg.layers {
        for t in 0..types.len() {
            for (_, values) in enc.adapter_mut(l, t).tensors_mut() {
                values.iter_mut().for_each(|v| *v += rng.uniform(-AMP, AMP));
            }
        }
    }
    enc.head_mut()
        .b
        .iter_mut()
        .for_each(|v| *v = rng.uniform(-AMP, AMP));

    let n = rng.range_inclusive(2, 4);
    let samples = (0..n)
        .map(|i| Sample {
            image: Image::from_shape_simple_fn((cfg.channels, cfg.image_size, cfg.image_size), || {
                rng.next_f64()
            }),
            qtype: types
                .by_index(i % 2 + usize::from(i >= 2))
                .expect("index in range"),
            target: rng.below(NUM_OPTIONS),
        })
        .collect();
    Ok((enc, samples))
}

/// Runs [`check_gradients`] on `cases` random configurations.
pub fn run_suite(cases: usize, master_seed: u64, eps: f64) -> Result<Vec<GradCheckResult>> {
    (0..cases as u64)
        .map(|i| {
            let (enc, samples) = random_case(derive_seed(master_seed, i))?;
            let batch: Vec<&Sample> = samples.iter().collect();
            check_gradients(&enc, &batch, eps)
        })
        .collect()
}
