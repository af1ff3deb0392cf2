//! Windowed, guided latent-diffusion engine for turning live-action video
//! into flat-shaded animation, with pluggable model slots.

pub mod config;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod video;
pub mod windows;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use models::ModelBundle;
pub use pipeline::{run_full, RenderJob, StageConfig};
pub use tensor::Tensor4;
pub use video::FrameVideo;
