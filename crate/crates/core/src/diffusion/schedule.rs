use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// The persisted description of a schedule; rebuilding from it is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub eta: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            kind: ScheduleKind::Cosine,
            eta: 0.0,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.kind, self.eta)
    }
}

/// Cumulative signal scales `alpha_bar[0..=T]` and DDIM stochasticity
/// `sigma[1..=T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: Option<ScheduleKind>,
    eta: f64,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn build_schedule(steps: usize, kind: ScheduleKind, eta: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be positive".into()));
    }
    let betas = match kind {
        ScheduleKind::Linear => linear_betas(steps),
        ScheduleKind::Cosine => cosine_betas(steps),
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in betas {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    let mut s = NoiseSchedule::from_alpha_bar(alpha_bar, eta)?;
    s.kind = Some(kind);
    Ok(s)
}

/// Standard 1e-4..0.02 betas for 1000 steps, rescaled so that the final
/// signal level stays comparable at shorter horizons.
fn linear_betas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let (start, end) = (1e-4 * scale, (0.02 * scale).min(0.999));
    let start = start.min(end);
    if steps == 1 {
        return vec![start];
    }
    (0..steps)
        .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    const OFFSET: f64 = 0.008;
    let f = |t: f64| (((t / steps as f64) + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (0..steps)
        .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
        .collect()
}

impl NoiseSchedule {
    /// Build from an explicit `alpha_bar` table (`alpha_bar[0]` must be 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidSchedule(format!("eta {eta} outside [0, 1]")));
        }
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule("alpha_bar[0] must equal 1".into()));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > 0.0) || !w[1].is_finite() {
                return Err(Error::InvalidSchedule(
                    "alpha_bar must be strictly decreasing and positive".into(),
                ));
            }
        }
        let steps = alpha_bar.len() - 1;
        let sigma = (1..=steps)
            .map(|t| {
                let (a, prev) = (alpha_bar[t], alpha_bar[t - 1]);
                eta * ((1.0 - prev) / (1.0 - a)).sqrt() * (1.0 - a / prev).sqrt()
            })
            .collect();
        Ok(Self {
            steps,
            kind: None,
            eta,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `None` for schedules built from an explicit table.
    pub fn spec(&self) -> Option<ScheduleSpec> {
        self.kind.map(|kind| ScheduleSpec {
            steps: self.steps,
            kind,
            eta: self.eta,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sigma_t` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_schedule() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = build_schedule(1, kind, 0.0).unwrap();
            assert_eq!(s.sigmas(), &[0.0]);
            assert_eq!(s.alpha_bars().len(), 2);
            assert!(s.alpha_bar(1) < 1.0 && s.alpha_bar(1) > 0.0);
        }
    }

    #[test]
    fn eta_zero_is_deterministic() {
        let s = build_schedule(10, ScheduleKind::Linear, 0.0).unwrap();
        assert!(s.sigmas().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eta_one_sigma_matches_closed_form() {
        // Frozen from an independent scalar evaluation of
        // sqrt((1-a_prev)/(1-a)) * sqrt(1 - a/a_prev) over the table below.
        let s = build_schedule(10, ScheduleKind::Linear, 1.0).unwrap();
        let ab = s.alpha_bars();
        for t in 1..=10 {
            let expect = ((1.0 - ab[t - 1]) / (1.0 - ab[t])).sqrt() * (1.0 - ab[t] / ab[t - 1]).sqrt();
            assert!((s.sigma(t) - expect).abs() < 1e-15);
        }
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn eta_one_matches_frozen_values() {
        // Explicit table so the values do not depend on the beta recipe.
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.9, 0.5, 0.1], 1.0).unwrap();
        let frozen = [0.0, 0.2981423969999719, 0.6666666666666666];
        for (t, f) in (1..=3).zip(frozen) {
            assert!((s.sigma(t) - f).abs() < 1e-12, "t={t}: {}", s.sigma(t));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_schedule(0, ScheduleKind::Linear, 0.0).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 1.5).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, -0.1).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5], 0.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5], 0.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn invariants_hold_for_all_kinds() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for &steps in &[1, 2, 7, 50, 200, 1000] {
                for &eta in &[0.0, 0.3, 1.0] {
                    let s = build_schedule(steps, kind, eta).unwrap();
                    let ab = s.alpha_bars();
                    assert_eq!(ab[0], 1.0);
                    assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
                    for t in 1..=steps {
                        assert!(s.sigma(t) >= 0.0);
                        assert!(s.sigma(t) <= (1.0 - ab[t - 1]).sqrt() + 1e-15);
                    }
                }
            }
        }
    }
}
