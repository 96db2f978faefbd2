//! Toolkit for a visual-puzzle pipeline that routes each question through
//! type-specific components.
//!
//! - [`scene`]: synthetic icon scenes with YOLO-style labels.
//! - [`qtype`]: question-type prompts, response parsing and majority voting.
//! - [`template`]: the model-input template, its parser and the detection
//!   and OCR file readers.
//! - [`encoder`]: a small frozen ViT with per-type adapters, training and
//!   gradient checking.
//! - [`eval`]: weighted option selection accuracy and report rendering.
//!
//! Runnable examples live in `examples/`, one per capability:
//! `synth_scenes`, `classify_types`, `build_template`, `train_adapters`,
//! `score_predictions` and `gradcheck`.

pub mod commands;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod qtype;
pub mod rng;
pub mod scene;
pub mod template;
pub mod types;

pub use error::{Error, Result};
