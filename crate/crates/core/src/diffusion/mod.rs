//! Diffusion core: noise schedule, latent codec, caption embeddings, the
//! conditioned denoiser, the object mask head and the training losses.

pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod dropout;
pub mod losses;
pub mod model;
pub(crate) mod nn;
pub mod omp;
pub mod rng;
pub mod schedule;
pub mod text;

pub use checkpoint::Checkpoint;
pub use codec::{IdentityAutoencoder, Latent, LatentCodec, LatentSpace, PixelCodec};
pub use denoiser::{Denoiser, DenoiserConfig, NoisePredictor};
pub use dropout::{dropout_conditions, sample_drop, DropDecision};
pub use losses::{loss_dm, loss_omp, loss_total, LatentBatch, LossOptions, Losses};
pub use model::{DiffusionModel, ModelConfig};
pub use omp::{downsample_mask, MaskPredictor, ObjectMaskPredictor, OmpConfig};
pub use schedule::{forward_diffuse, predict_x0, NoiseSchedule, ScheduleConfig};
pub use text::{TextEmbedding, TextEncoder, Vocabulary};
