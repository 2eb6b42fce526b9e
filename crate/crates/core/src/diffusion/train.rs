use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Autoencoder, LatentCodec, MlpDenoiser, MlpDenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub time_freqs: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the class condition by the null class.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Size of the fixed batch used to report the loss.
    pub eval_batch: usize,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            blocks: 2,
            time_freqs: 16,
            steps: 3000,
            batch: 64,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
            eval_batch: 256,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Total optimizer steps applied to the returned model.
    pub steps: usize,
    /// Loss on a fixed evaluation batch after training.
    pub final_loss: f64,
    /// `(step, running mean loss)` checkpoints.
    pub curve: Vec<(usize, f64)>,
}

struct Batch {
    z: Array2<f64>,
    t: Vec<usize>,
    cond: Vec<Option<usize>>,
    eps: Array2<f64>,
}

fn draw_batch(
    latents: &Array2<f64>,
    labels: &[usize],
    schedule: &NoiseSchedule,
    size: usize,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let (n, d) = latents.dim();
    let mut z = Array2::zeros((size, d));
    let mut eps = Array2::zeros((size, d));
    let mut t = Vec::with_capacity(size);
    let mut cond = Vec::with_capacity(size);
    for i in 0..size {
        let k = rng.gen_range(0..n);
        let ti = rng.gen_range(1..=schedule.steps());
        let a = schedule.alpha_bar(ti);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            eps[[i, j]] = e;
            z[[i, j]] = sa * latents[[k, j]] + sn * e;
        }
        t.push(ti);
        cond.push((rng.gen::<f64>() >= dropout).then_some(labels[k]));
    }
    Batch { z, t, cond, eps }
}

fn batch_loss(model: &MlpDenoiser, b: &Batch) -> f64 {
    let pred = model.forward_cached(b.z.view(), &b.t, &b.cond).0;
    (&pred - &b.eps).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Fit a class-conditional noise predictor on `latents` (one row per sample)
/// with the standard epsilon-prediction objective. Resumes from `init`
/// (model, steps already taken) when given.
pub fn train_denoiser(
    latents: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    schedule: &NoiseSchedule,
    config: &DenoiserTrainConfig,
    init: Option<(MlpDenoiser, usize)>,
) -> Result<(MlpDenoiser, TrainReport)> {
    if latents.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != latents.nrows() {
        return Err(Error::InvalidArgument("one label per latent is required".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            classes: num_classes,
        });
    }
    let (mut model, start) = match init {
        Some((m, s)) => (m, s),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let cfg = MlpDenoiserConfig {
                dim: latents.ncols(),
                hidden: config.hidden,
                blocks: config.blocks,
                num_classes,
                time_freqs: config.time_freqs,
            };
            (MlpDenoiser::new(cfg, &mut rng), 0)
        }
    };
    if model.config().dim != latents.ncols() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.config().dim],
            got: vec![latents.ncols()],
        });
    }
    let mut opt = Adam::new(config.lr);
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut count = 0usize;
    let log_every = (config.steps / 20).max(1);
    for step in start..config.steps {
        // Per-step RNG so that resumed runs draw the same batches.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64 + 1);
        let b = draw_batch(latents, labels, schedule, config.batch, config.cond_dropout, &mut rng);
        let (pred, cache) = model.forward_cached(b.z.view(), &b.t, &b.cond);
        let diff = &pred - &b.eps;
        let loss = diff.mapv(|v| v * v).mean().unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss at step {step}")));
        }
        let g = diff * (2.0 / pred.len() as f64);
        model.backward(&cache, &g);
        opt.step(model.params_mut());
        running += loss;
        count += 1;
        if (step + 1) % log_every == 0 || step + 1 == config.steps {
            curve.push((step + 1, running / count as f64));
            log::debug!("denoiser step {} loss {:.5}", step + 1, running / count as f64);
            running = 0.0;
            count = 0;
        }
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let eval = draw_batch(latents, labels, schedule, config.eval_batch.max(1), 0.0, &mut eval_rng);
    let final_loss = batch_loss(&model, &eval);
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("denoiser evaluation loss".into()));
    }
    let steps = config.steps.max(start);
    if let (Some(path), true) = (&config.checkpoint, steps > start) {
        let spec = schedule
            .spec()
            .ok_or_else(|| Error::InvalidArgument("cannot persist a table-defined schedule".into()))?;
        crate::checkpoint::save_denoiser(path, &model, &spec, steps)?;
    }
    Ok((
        model,
        TrainReport {
            steps,
            final_loss,
            curve,
        },
    ))
}

/// Fit a linear autoencoder by minimizing mean squared reconstruction error.
pub fn train_autoencoder(
    images: &[Array3<f64>],
    latent_dim: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(LatentCodec, TrainReport)> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let shape = [first.dim().0, first.dim().1, first.dim().2];
    let d: usize = shape.iter().product();
    let mut flat = Array2::zeros((images.len(), d));
    for (mut row, x) in flat.axis_iter_mut(Axis(0)).zip(images) {
        crate::error::check_shape(&shape, x.shape())?;
        row.assign(&x.as_standard_layout().iter().copied().collect::<Array1<f64>>());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ae = Autoencoder::new(shape, latent_dim, &mut rng);
    let mut opt = Adam::new(lr);
    let mut curve = Vec::new();
    let recon_loss = |ae: &Autoencoder, x: &Array2<f64>| -> (Array2<f64>, Array2<f64>, f64) {
        let z = ae.encoder.forward(x.view());
        let y = ae.decoder.forward(z.view());
        let diff = &y - x;
        let loss = diff.mapv(|v| v * v).mean().unwrap();
        (z, diff, loss)
    };
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch.max(1)).map(|_| rng.gen_range(0..images.len())).collect();
        let x = flat.select(Axis(0), &idx);
        let (z, diff, loss) = recon_loss(&ae, &x);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("autoencoder loss at step {step}")));
        }
        let g = diff * (2.0 / x.len() as f64);
        ae.decoder.accumulate(z.view(), g.view());
        let gz = ae.decoder.backward_input(g.view());
        ae.encoder.accumulate(x.view(), gz.view());
        opt.step(ae.params_mut());
        if (step + 1) % (steps / 10).max(1) == 0 {
            curve.push((step + 1, loss));
        }
    }
    let final_loss = recon_loss(&ae, &flat).2;
    Ok((
        LatentCodec::Autoencoder(ae),
        TrainReport {
            steps,
            final_loss,
            curve,
        },
    ))
}
