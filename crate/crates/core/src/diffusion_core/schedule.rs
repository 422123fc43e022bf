use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta DDPM schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")));
    }
    let betas: Vec<f64> =
        (0..steps).map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Invalid(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(x0: &[f32], t: usize, eps: &[f32], s: &NoiseSchedule) -> Result<Vec<f32>> {
    s.check_t(t)?;
    noise_with(x0, s.alpha_bars[t], eps)
}

/// [`add_noise`] for an explicit `alpha_bar`.
pub fn noise_with(x0: &[f32], alpha_bar: f64, eps: &[f32]) -> Result<Vec<f32>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} values, eps has {}", x0.len(), eps.len())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).max(0.0).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_two_steps() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-12);
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(4, 0.2, 0.1).is_err());
    }

    #[test]
    fn endpoints() {
        let x = [0.3f32, -0.7];
        let e = [1.5f32, 0.25];
        assert_eq!(noise_with(&x, 1.0, &e).unwrap(), x);
        assert_eq!(noise_with(&x, 0.0, &e).unwrap(), e);
        let s = make_schedule(8, 0.01, 0.02).unwrap();
        assert!(add_noise(&x, 8, &e, &s).is_err());
    }
}
