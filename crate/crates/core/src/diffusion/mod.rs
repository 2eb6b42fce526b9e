//! Forward noising, DDIM reverse steps, the denoiser contract and its toy
//! implementation, and the optional latent codec.

mod codec;
mod denoiser;
mod process;
mod sampler;
mod schedule;
mod train;

pub use codec::{Autoencoder, LatentCodec};
pub use denoiser::{Denoiser, MlpDenoiser, MlpDenoiserConfig};
pub use process::{ddim_step, estimate_x0, forward_diffuse, DiffusionDraw};
pub use sampler::{sample, sample_from, ScoreHook, StepNoise};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use train::{train_autoencoder, train_denoiser, DenoiserTrainConfig, TrainReport};
