//! Toy vision encoder with question-type-routed adapters.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{trainable_param_formula, EncoderConfig, TrainConfig, NUM_OPTIONS};
pub use gradcheck::{check_gradients, run_suite, GradCheckResult};
pub use model::{AdaptedEncoder, Gradients, Image, Sample};
pub use train::{
    accuracy, make_counting_task, mean_loss, to_encoder_image, train, CountingTaskSpec, LabeledDataset,
    TrainReport,
};
