use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ddim_step, estimate_x0, Denoiser, NoiseSchedule};
use crate::error::{check_shape, Result};

/// Extra score added to the noise estimate before each reverse step.
pub trait ScoreHook {
    fn score(&mut self, z_t: &Array1<f64>, t: usize, eps_hat: &Array1<f64>) -> Result<Array1<f64>>;
}

impl<F> ScoreHook for F
where
    F: FnMut(&Array1<f64>, usize, &Array1<f64>) -> Result<Array1<f64>>,
{
    fn score(&mut self, z_t: &Array1<f64>, t: usize, eps_hat: &Array1<f64>) -> Result<Array1<f64>> {
        self(z_t, t, eps_hat)
    }
}

/// Gaussian noise addressed by timestep, so that any sub-range of a
/// trajectory can be replayed exactly.
#[derive(Debug, Clone, Copy)]
pub struct StepNoise {
    seed: u64,
}

impl StepNoise {
    const START_STREAM: u64 = u64::MAX;

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn stream(&self, stream: u64, dim: usize) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
    }

    /// Noise injected by the reverse step at `t`.
    pub fn step(&self, t: usize, dim: usize) -> Array1<f64> {
        self.stream(t as u64, dim)
    }

    /// Noise for the starting state (pure noise or the forward draw).
    pub fn start(&self, dim: usize) -> Array1<f64> {
        self.stream(Self::START_STREAM, dim)
    }
}

/// Run `T` reverse steps from pure noise.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    condition: Option<usize>,
    hook: Option<&mut dyn ScoreHook>,
    noise: &StepNoise,
    x0_bound: Option<f64>,
) -> Result<Array1<f64>> {
    let z = noise.start(denoiser.dim());
    sample_from(denoiser, schedule, z, schedule.steps(), condition, hook, noise, x0_bound, None)
}

/// Run reverse steps `t_start, ..., 1` from `z_start`. When `trajectory` is
/// given, the state after every step is appended to it (`x_{t-1}` for each t).
///
/// With `x0_bound`, a step whose clean estimate leaves `[-b, b]` is taken with
/// the clamped estimate and the noise prediction consistent with it. Near
/// `t = T` the estimate divides by `sqrt(alpha_bar)` and small noise errors
/// would otherwise blow up.
#[allow(clippy::too_many_arguments)]
pub fn sample_from(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z_start: Array1<f64>,
    t_start: usize,
    condition: Option<usize>,
    mut hook: Option<&mut dyn ScoreHook>,
    noise: &StepNoise,
    x0_bound: Option<f64>,
    mut trajectory: Option<&mut Vec<Array1<f64>>>,
) -> Result<Array1<f64>> {
    check_shape(&[denoiser.dim()], z_start.shape())?;
    if t_start > 0 {
        schedule.check_t(t_start)?;
    }
    let mut z = z_start;
    for t in (1..=t_start).rev() {
        let mut eps = denoiser.predict(&z, t, condition);
        if let Some(h) = hook.as_deref_mut() {
            let s = h.score(&z, t, &eps)?;
            check_shape(eps.shape(), s.shape())?;
            eps += &s;
        }
        if let Some(b) = x0_bound {
            let x0 = estimate_x0(&z, t, &eps, schedule)?;
            if x0.iter().any(|v| v.abs() > b) {
                let ab = schedule.alpha_bar(t);
                eps = (&z - &(x0.mapv(|v| v.clamp(-b, b)) * ab.sqrt())) / (1.0 - ab).sqrt();
            }
        }
        let step_noise = (schedule.sigma(t) > 0.0).then(|| noise.step(t, z.len()));
        z = ddim_step(&z, t, &eps, schedule, step_noise.as_ref())?;
        if let Some(tr) = trajectory.as_deref_mut() {
            tr.push(z.clone());
        }
    }
    Ok(z)
}
