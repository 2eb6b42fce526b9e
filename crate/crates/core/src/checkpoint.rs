//! Model checkpoints stored as tensor archives with typed metadata.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::diffusion::{Autoencoder, LatentCodec, MlpDenoiser, MlpDenoiserConfig, ScheduleSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Denoiser,
    Codec,
    Classifier,
}

pub(crate) fn new_archive(kind: CheckpointKind) -> Result<TensorArchive> {
    let mut a = TensorArchive::new();
    a.set_meta("kind", &kind)?;
    a.set_meta("checkpoint_version", &CHECKPOINT_VERSION)?;
    Ok(a)
}

pub(crate) fn open_archive(path: &Path, kind: CheckpointKind) -> Result<TensorArchive> {
    let a = TensorArchive::read(path)?;
    check_archive(&a, kind)?;
    Ok(a)
}

pub(crate) fn check_archive(a: &TensorArchive, kind: CheckpointKind) -> Result<()> {
    let version: u32 = a.meta("checkpoint_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let found: CheckpointKind = a.meta("kind")?;
    if found != kind {
        return Err(Error::Format(format!("expected a {kind:?} checkpoint, found {found:?}")));
    }
    Ok(())
}

pub(crate) fn lookup(a: &TensorArchive) -> impl Fn(&str) -> Option<ndarray::ArrayD<f64>> + '_ {
    move |name| a.get(name).cloned()
}

#[derive(Debug, Clone)]
pub struct DenoiserCheckpoint {
    pub model: MlpDenoiser,
    pub schedule: ScheduleSpec,
    pub step: usize,
}

pub fn save_denoiser(path: &Path, model: &MlpDenoiser, schedule: &ScheduleSpec, step: usize) -> Result<()> {
    let mut a = new_archive(CheckpointKind::Denoiser)?;
    a.set_meta("config", model.config())?;
    a.set_meta("schedule", schedule)?;
    a.set_meta("step", &step)?;
    a.extend(model.state());
    a.write(path)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserCheckpoint> {
    let a = open_archive(path, CheckpointKind::Denoiser)?;
    let config: MlpDenoiserConfig = a.meta("config")?;
    let mut model = MlpDenoiser::new(config, &mut ChaCha8Rng::seed_from_u64(0));
    model.load_state(&lookup(&a))?;
    Ok(DenoiserCheckpoint {
        model,
        schedule: a.meta("schedule")?,
        step: a.meta("step")?,
    })
}

pub fn save_codec(path: &Path, codec: &LatentCodec) -> Result<()> {
    let mut a = new_archive(CheckpointKind::Codec)?;
    a.set_meta("shape", &codec.image_shape())?;
    match codec {
        LatentCodec::Identity { .. } => a.set_meta("codec", &"identity")?,
        LatentCodec::Autoencoder(ae) => {
            a.set_meta("codec", &"autoencoder")?;
            a.set_meta("latent_dim", &ae.latent_dim())?;
            a.extend(ae.state());
        }
    }
    a.write(path)
}

pub fn load_codec(path: &Path) -> Result<LatentCodec> {
    let a = open_archive(path, CheckpointKind::Codec)?;
    let shape: [usize; 3] = a.meta("shape")?;
    let kind: String = a.meta("codec")?;
    match kind.as_str() {
        "identity" => Ok(LatentCodec::identity(shape)),
        "autoencoder" => {
            let latent_dim: usize = a.meta("latent_dim")?;
            let mut ae = Autoencoder::new(shape, latent_dim, &mut ChaCha8Rng::seed_from_u64(0));
            ae.load_state(&lookup(&a))?;
            Ok(LatentCodec::Autoencoder(ae))
        }
        other => Err(Error::Format(format!("unknown codec `{other}`"))),
    }
}
