//! Full model, objectives, optimiser, persistence and inference.

pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod generator;
pub mod infer;
pub mod loss;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, ModelConfig, Preset};
pub use discriminator::Discriminator;
pub use generator::{Generator, GeneratorOutput};
pub use infer::{composite, flow_endpoint_error, sliding_window_inference, window_schedule, WindowPlan};
pub use loss::{adversarial_loss, discriminator_loss, generator_loss, reconstruction_loss, GeneratorLoss};
pub use optim::Adam;
pub use train::{flow_warmup_step, gather, load_generator, sample_batch, Batch, StepRecord, Trainer, LOG_HEADER};
