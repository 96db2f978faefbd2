//! Adapter-only SGD training, and the toy counting task used to exercise it.

use image::RgbImage;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, TrainConfig};
use super::model::{cross_entropy, AdaptedEncoder, Image, Sample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::scene::{compose_scene, IconLibrary, SceneSpec};
use crate::types::TypeList;

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub types: Vec<String>,
    pub trainable_params: usize,
    /// Mean training-set loss before the first step.
    pub initial_loss: f64,
    /// Minibatch loss per step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub diverged_at: Option<usize>,
}

/// Mean cross-entropy over `samples` without computing gradients.
pub fn mean_loss(enc: &AdaptedEncoder, samples: &[Sample], with_adapters: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let losses = samples
        .par_iter()
        .map(|s| {
            let logits = if with_adapters {
                enc.forward(&s.image, &s.qtype)?
            } else {
                enc.forward_backbone(&s.image)?
            };
            Ok(cross_entropy(&Array1::from(logits.to_vec()), s.target).0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Fraction of samples whose argmax logit equals the target.
pub fn accuracy(enc: &AdaptedEncoder, samples: &[Sample], with_adapters: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            Ok(usize::from(
                enc.predict(&s.image, &s.qtype, with_adapters)? == s.target,
            ))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Plain SGD on the head and (unless disabled) the routed adapters. The
/// backbone is never written; its checksum is recorded before and after.
///
/// A non-finite minibatch loss stops training and returns
/// [`Error::Diverged`] carrying the partial report.
pub fn train(enc: &mut AdaptedEncoder, data: &LabeledDataset, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let with_adapters = tc.train_adapters;
    let checksum_before = enc.backbone_checksum();
    let initial_loss = mean_loss(enc, &data.train, with_adapters)?;

    let mut rng = Rng::new(tc.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(tc.steps);
    let mut diverged_at = None;

    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(&data.train[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = enc.loss_and_grads_with(&batch, with_adapters)?;
        losses.push(loss);
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        enc.apply_sgd(&grads, tc.learning_rate);
        if step % 200 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
    }

    let report = TrainReport {
        encoder: enc.config().clone(),
        train: tc.clone(),
        types: enc.types().names().map(String::from).collect(),
        trainable_params: enc.count_trainable_params(),
        initial_loss,
        final_loss: mean_loss(enc, &data.train, with_adapters)?,
        train_accuracy: accuracy(enc, &data.train, with_adapters)?,
        val_accuracy: if data.val.is_empty() {
            None
        } else {
            Some(accuracy(enc, &data.val, with_adapters)?)
        },
        losses,
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: enc.backbone_checksum(),
        diverged_at,
    };
    match diverged_at {
        Some(step) => Err(Error::Diverged {
            step,
            loss: report.losses[step],
            report: Box::new(report),
        }),
        None => Ok(report),
    }
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

/// Scene recipe for the counting task. The icon count is drawn per scene.
///
/// The defaults use one glyph class at one size. With mixed shapes or sizes
/// the ink area of a scene no longer determines its count, and a frozen
/// random encoder with token-wise adapters cannot separate the classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountingTaskSpec {
    /// Library classes to draw from; empty means all.
    pub classes: Vec<String>,
    /// Canvas side; must be a multiple of the encoder image size.
    pub canvas: u32,
    pub size_min: u32,
    pub size_max: u32,
    pub max_iou: f64,
    pub max_count: usize,
}

impl Default for CountingTaskSpec {
    fn default() -> Self {
        Self {
            classes: vec!["square".into()],
            canvas: 128,
            size_min: 20,
            size_max: 20,
            max_iou: 0.0,
            max_count: 5,
        }
    }
}

/// Downscales by an integer factor with box averaging and maps to "ink"
/// (`1 - value / 255`), so the white background is 0. One channel means
/// luminance; three keeps RGB.
pub fn to_encoder_image(img: &RgbImage, cfg: &EncoderConfig) -> Result<Image> {
    let side = cfg.image_size as u32;
    if img.width() != img.height() || !img.width().is_multiple_of(side) {
        return Err(Error::invalid(
            "image",
            format!(
                "{}x{} cannot be box-downscaled to {side}x{side}",
                img.width(),
                img.height()
            ),
        ));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::invalid(
            "encoder config",
            "channels must be 1 or 3 for RGB scenes",
        ));
    }
    let f = img.width() / side;
    let norm = 1.0 / (f * f) as f64 / 255.0;
    let mut out = Image::zeros((cfg.channels, cfg.image_size, cfg.image_size));
    for y in 0..side {
        for x in 0..side {
            let mut acc = [0.0f64; 3];
            for dy in 0..f {
                for dx in 0..f {
                    let p = img.get_pixel(x * f + dx, y * f + dy);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            let (yy, xx) = (y as usize, x as usize);
            if cfg.channels == 1 {
                let lum = 0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2];
                out[[0, yy, xx]] = 1.0 - lum * norm;
            } else {
                for c in 0..3 {
                    out[[c, yy, xx]] = 1.0 - acc[c] * norm;
                }
            }
        }
    }
    Ok(out)
}

/// Scenes with `n` uniform in `1..=max_count` icons, labeled `n - 1`, all
/// routed as "counting". Every tenth of the shuffled scenes goes to
/// validation.
pub fn make_counting_task(
    lib: &IconLibrary,
    n_scenes: usize,
    seed: u64,
    cfg: &EncoderConfig,
    types: &TypeList,
    task: &CountingTaskSpec,
) -> Result<LabeledDataset> {
    let qtype = types.get("counting")?;
    if task.max_count == 0 || task.max_count > super::config::NUM_OPTIONS {
        return Err(Error::invalid("counting task", "max_count must be in 1..=5"));
    }
    let base = SceneSpec {
        width: task.canvas,
        height: task.canvas,
        n_min: 1,
        n_max: 1,
        size_min: task.size_min,
        size_max: task.size_max,
        max_iou: task.max_iou,
        seed,
    };
    base.validate()?;
    let subset;
    let lib = if task.classes.is_empty() {
        lib
    } else {
        subset = lib.subset(&task.classes)?;
        &subset
    };

    let samples = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(derive_seed(seed, i as u64));
            let n = rng.range_inclusive(1, task.max_count);
            let spec = SceneSpec {
                n_min: n,
                n_max: n,
                ..base.clone()
            };
            let scene = compose_scene(&spec, lib, &mut rng)?;
            // a skipped icon lowers the true count; label what was drawn
            let drawn = scene.annotations.len();
            Ok(Sample {
                image: to_encoder_image(&scene.image, cfg)?,
                qtype: qtype.clone(),
                target: drawn - 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..n_scenes).collect();
    shuffle(&mut order, &mut Rng::new(derive_seed(seed, u64::MAX)));
    let n_val = n_scenes / 10;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let take = |i: &usize, slots: &mut Vec<Option<Sample>>| slots[*i].take().expect("each index once");
    let val = order[..n_val].iter().map(|i| take(i, &mut slots)).collect();
    let train = order[n_val..].iter().map(|i| take(i, &mut slots)).collect();
    Ok(LabeledDataset { train, val })
}
