use ndarray::{Array, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::NoiseSchedule;
use crate::error::{check_shape, Error, Result};

/// One draw of the forward process at timestep `t`.
#[derive(Debug, Clone)]
pub struct DiffusionDraw<D: Dimension> {
    pub x0: Array<f64, D>,
    pub t: usize,
    pub eps: Array<f64, D>,
    pub xt: Array<f64, D>,
}

/// `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`, with fresh Gaussian noise unless
/// `noise` is supplied.
pub fn forward_diffuse<D: Dimension, R: Rng + ?Sized>(
    x0: &Array<f64, D>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Array<f64, D>>,
    rng: &mut R,
) -> Result<DiffusionDraw<D>> {
    schedule.check_t(t)?;
    let eps = match noise {
        Some(n) => {
            check_shape(x0.shape(), n.shape())?;
            n.clone()
        }
        None => Array::from_shape_simple_fn(x0.raw_dim(), || rng.sample(StandardNormal)),
    };
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut xt = x0.clone();
    Zip::from(&mut xt).and(&eps).for_each(|x, &e| *x = sa * *x + sn * e);
    Ok(DiffusionDraw {
        x0: x0.clone(),
        t,
        eps,
        xt,
    })
}

/// Clean-state estimate `(x_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t)`.
pub fn estimate_x0<D: Dimension>(
    xt: &Array<f64, D>,
    t: usize,
    eps_hat: &Array<f64, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    schedule.check_t(t)?;
    check_shape(xt.shape(), eps_hat.shape())?;
    let a = schedule.alpha_bar(t);
    if a <= 0.0 {
        return Err(Error::InvalidSchedule(format!("alpha_bar[{t}] is zero")));
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut x0 = xt.clone();
    Zip::from(&mut x0).and(eps_hat).for_each(|x, &e| *x = (*x - sn * e) / sa);
    Ok(x0)
}

/// One DDIM update from `x_t` to `x_{t-1}`. `noise` is required whenever
/// `sigma_t > 0` and ignored otherwise.
pub fn ddim_step<D: Dimension>(
    xt: &Array<f64, D>,
    t: usize,
    eps_hat: &Array<f64, D>,
    schedule: &NoiseSchedule,
    noise: Option<&Array<f64, D>>,
) -> Result<Array<f64, D>> {
    let x0 = estimate_x0(xt, t, eps_hat, schedule)?;
    let prev = schedule.alpha_bar(t - 1);
    let sigma = schedule.sigma(t);
    let dir2 = 1.0 - prev - sigma * sigma;
    if dir2 < -1e-12 {
        return Err(Error::InvalidSchedule(format!(
            "1 - alpha_bar[{}] - sigma^2 = {dir2} is negative",
            t - 1
        )));
    }
    let (sp, sd) = (prev.sqrt(), dir2.max(0.0).sqrt());
    let mut out = x0;
    Zip::from(&mut out).and(eps_hat).for_each(|x, &e| *x = sp * *x + sd * e);
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| {
            Error::InvalidArgument(format!("sigma_{t} = {sigma} > 0 but no noise was supplied"))
        })?;
        check_shape(out.shape(), n.shape())?;
        Zip::from(&mut out).and(n).for_each(|x, &e| *x += sigma * e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};
    use ndarray::{arr1, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn randn(n: usize, r: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_simple_fn(n, || r.sample(StandardNormal))
    }

    #[test]
    fn near_unit_signal_keeps_x0() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 1.0 - 1e-14, 0.5], 0.0).unwrap();
        let x0 = arr1(&[0.3, -1.0, 2.0]);
        let d = forward_diffuse(&x0, 1, &s, None, &mut rng()).unwrap();
        for (a, b) in d.xt.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_signal_scales_noise() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5], 0.0).unwrap();
        let eps = arr1(&[1.0, -2.0, 0.5]);
        let d = forward_diffuse(&Array1::zeros(3), 1, &s, Some(&eps), &mut rng()).unwrap();
        for (a, e) in d.xt.iter().zip(eps.iter()) {
            assert!((a - 0.5f64.sqrt() * e).abs() < 1e-15);
        }
    }

    #[test]
    fn elementwise_oracle() {
        let s = build_schedule(10, ScheduleKind::Linear, 0.0).unwrap();
        let mut r = rng();
        let x0 = randn(64, &mut r);
        let d = forward_diffuse(&x0, 5, &s, None, &mut r).unwrap();
        let a = s.alpha_bar(5);
        for i in 0..64 {
            let expect = a.sqrt() * x0[i] + (1.0 - a).sqrt() * d.eps[i];
            assert!((d.xt[i] - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn estimate_inverts_forward() {
        let s = build_schedule(50, ScheduleKind::Cosine, 0.0).unwrap();
        let mut r = rng();
        let x0 = randn(32, &mut r);
        for t in [1, 10, 25, 50] {
            let d = forward_diffuse(&x0, t, &s, None, &mut r).unwrap();
            let back = estimate_x0(&d.xt, t, &d.eps, &s).unwrap();
            assert!((&back - &x0).iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn estimate_hand_value() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25], 0.0).unwrap();
        let v = estimate_x0(&arr1(&[1.0]), 1, &arr1(&[0.0]), &s).unwrap();
        assert_eq!(v[0], 2.0);
    }

    #[test]
    fn terminal_step_returns_x0_estimate() {
        let s = build_schedule(5, ScheduleKind::Linear, 0.0).unwrap();
        let mut r = rng();
        let (xt, eps) = (randn(8, &mut r), randn(8, &mut r));
        let step = ddim_step(&xt, 1, &eps, &s, None).unwrap();
        let x0 = estimate_x0(&xt, 1, &eps, &s).unwrap();
        assert_eq!(step, x0);
    }

    #[test]
    fn true_noise_reproduces_forward_trajectory() {
        let s = build_schedule(20, ScheduleKind::Linear, 0.0).unwrap();
        let mut r = rng();
        let x0 = randn(16, &mut r);
        let eps = randn(16, &mut r);
        for t in 2..=20 {
            let d = forward_diffuse(&x0, t, &s, Some(&eps), &mut r).unwrap();
            let prev = ddim_step(&d.xt, t, &eps, &s, None).unwrap();
            let expect = forward_diffuse(&x0, t - 1, &s, Some(&eps), &mut r).unwrap().xt;
            assert!((&prev - &expect).iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn stochastic_step_scalar_oracle() {
        let s = build_schedule(10, ScheduleKind::Linear, 0.7).unwrap();
        let mut r = rng();
        let (xt, eps, z) = (randn(6, &mut r), randn(6, &mut r), randn(6, &mut r));
        let t = 6;
        let out = ddim_step(&xt, t, &eps, &s, Some(&z)).unwrap();
        let (a, ap, sg) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.sigma(t));
        assert!(sg > 0.0);
        for i in 0..6 {
            let x0 = (xt[i] - (1.0 - a).sqrt() * eps[i]) / a.sqrt();
            let expect = ap.sqrt() * x0 + (1.0 - ap - sg * sg).sqrt() * eps[i] + sg * z[i];
            assert!((out[i] - expect).abs() < 1e-12);
        }
        assert!(ddim_step(&xt, t, &eps, &s, None).is_err());
    }

    #[test]
    fn rejects_out_of_range_and_shape_errors() {
        let s = build_schedule(4, ScheduleKind::Linear, 0.0).unwrap();
        let x = Array1::<f64>::zeros(3);
        assert!(forward_diffuse(&x, 0, &s, None, &mut rng()).is_err());
        assert!(forward_diffuse(&x, 5, &s, None, &mut rng()).is_err());
        assert!(forward_diffuse(&x, 1, &s, Some(&Array1::zeros(4)), &mut rng()).is_err());
        assert!(estimate_x0(&x, 2, &Array1::zeros(2), &s).is_err());
    }
}
